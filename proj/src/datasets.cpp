#include "ocd/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numbers>
#include <sstream>

#include "ocd/rng.hpp"

namespace ocd {

namespace fs = std::filesystem;

Target Dataset::target(Index i) const {
  if (task == TaskKind::Classification) {
    return Target::classification(labels[static_cast<std::size_t>(i)]);
  }
  return Target::regression(targets.row(i).transpose());
}

Dataset Dataset::subset(const std::vector<std::size_t>& idx) const {
  Dataset out;
  out.task = task;
  out.num_classes = num_classes;
  out.feature_mean = feature_mean;
  out.feature_std = feature_std;
  out.inputs.resize(static_cast<Index>(idx.size()), dim());
  if (task == TaskKind::Regression) out.targets.resize(static_cast<Index>(idx.size()), targets.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    const auto src = static_cast<Index>(idx[r]);
    out.inputs.row(static_cast<Index>(r)) = inputs.row(src);
    if (task == TaskKind::Classification) {
      out.labels.push_back(labels[idx[r]]);
    } else {
      out.targets.row(static_cast<Index>(r)) = targets.row(src);
    }
    out.source_index.push_back(source_index.empty() ? idx[r] : source_index[idx[r]]);
  }
  return out;
}

namespace {

void set_identity_stats(Dataset& d) {
  d.feature_mean = Vector::Zero(d.dim());
  d.feature_std = Vector::Ones(d.dim());
  d.source_index.resize(static_cast<std::size_t>(d.size()));
  for (std::size_t i = 0; i < d.source_index.size(); ++i) d.source_index[i] = i;
}

std::vector<std::size_t> permutation(std::size_t n, RngStream& rng) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[rng.uniform_index(i)]);
  return p;
}

}  // namespace

Dataset gen_blobs(std::uint64_t seed, Index n, int num_classes, double spread,
                  Index dim) {
  if (num_classes < 2 || n < num_classes || dim < 2) {
    throw std::invalid_argument("gen_blobs needs n >= C >= 2 and dim >= 2");
  }
  RngStream rng(seed, 0xB10B5);
  const auto order = permutation(static_cast<std::size_t>(n), rng);
  Dataset d;
  d.task = TaskKind::Classification;
  d.num_classes = num_classes;
  d.inputs = Matrix::Zero(n, dim);
  d.labels.resize(static_cast<std::size_t>(n));
  constexpr double kRadius = 3.0;
  for (Index i = 0; i < n; ++i) {
    const int label = static_cast<int>(order[static_cast<std::size_t>(i)] %
                                       static_cast<std::size_t>(num_classes));
    const double angle = 2.0 * std::numbers::pi * label / num_classes;
    d.labels[static_cast<std::size_t>(i)] = label;
    for (Index j = 0; j < dim; ++j) d.inputs(i, j) = spread * rng.gaussian();
    d.inputs(i, 0) += kRadius * std::cos(angle);
    d.inputs(i, 1) += kRadius * std::sin(angle);
  }
  set_identity_stats(d);
  return d;
}

TabularTask TabularTask::make(std::uint64_t seed, Index dim, double noise_std,
                              Index terms) {
  RngStream rng(seed, 0x7AB);
  TabularTask t;
  t.frequencies = std::sqrt(1.5 / static_cast<double>(dim)) * rng.gaussian_matrix(terms, dim);
  t.noise_std = noise_std;
  return t;
}

double TabularTask::clean_target(const Vector& x) const {
  return (frequencies * x).array().sin().sum();
}

double TabularTask::analytic_variance() const {
  // For x ~ N(0, I): E[sin(a.x) sin(b.x)] =
  //   (exp(-|a-b|^2/2) - exp(-|a+b|^2/2)) / 2, and E[sin(a.x)] = 0.
  double var = noise_std * noise_std;
  for (Index j = 0; j < frequencies.rows(); ++j) {
    for (Index k = 0; k < frequencies.rows(); ++k) {
      const double dm = (frequencies.row(j) - frequencies.row(k)).squaredNorm();
      const double dp = (frequencies.row(j) + frequencies.row(k)).squaredNorm();
      var += 0.5 * (std::exp(-0.5 * dm) - std::exp(-0.5 * dp));
    }
  }
  return var;
}

Dataset gen_tabular_reg(std::uint64_t seed, Index n, Index dim, double noise_std) {
  if (n < 1 || dim < 1) throw std::invalid_argument("gen_tabular_reg needs n, d >= 1");
  const TabularTask task = TabularTask::make(seed, dim, noise_std);
  RngStream rng(seed, 0x7AB1);
  Dataset d;
  d.task = TaskKind::Regression;
  d.inputs.resize(n, dim);
  d.targets.resize(n, 1);
  for (Index i = 0; i < n; ++i) {
    const Vector x = rng.gaussian_vector(dim);
    d.inputs.row(i) = x.transpose();
    d.targets(i, 0) = task.clean_target(x) + noise_std * rng.gaussian();
  }
  set_identity_stats(d);
  return d;
}

namespace {

// RFC-4180 subset: quoted fields with "" escapes, no embedded newlines.
std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  bool was_quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      if (!cur.empty()) {
        throw FormatError("line " + std::to_string(line_no) + ": stray quote");
      }
      quoted = was_quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
      was_quoted = false;
    } else {
      if (was_quoted) {
        throw FormatError("line " + std::to_string(line_no) +
                          ": text after closing quote");
      }
      cur += c;
    }
  }
  if (quoted) throw FormatError("line " + std::to_string(line_no) + ": unterminated quote");
  fields.push_back(std::move(cur));
  return fields;
}

double parse_number(const std::string& field, std::size_t line_no) {
  std::size_t b = 0, e = field.size();
  while (b < e && field[b] == ' ') ++b;
  while (e > b && field[e - 1] == ' ') --e;
  double v = 0.0;
  const char* first = field.data() + b;
  const char* last = field.data() + e;
  if (b < e && *first == '+') ++first;
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (b == e || ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw FormatError("line " + std::to_string(line_no) + ": '" + field +
                      "' is not a finite number");
  }
  return v;
}

}  // namespace

Dataset load_csv_table(const fs::path& path, const std::string& target_column) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) {
      header = split_csv_line(line, line_no);
      break;
    }
  }
  if (header.empty()) throw FormatError(path.string() + ": missing header row");
  std::size_t target = header.size();
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (header[c] == target_column) target = c;
  }
  if (target == header.size()) {
    throw FormatError(path.string() + ": no column named '" + target_column + "'");
  }
  if (header.size() < 2) throw FormatError(path.string() + ": no feature columns");

  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_csv_line(line, line_no);
    if (fields.size() != header.size()) {
      throw FormatError("line " + std::to_string(line_no) + ": expected " +
                        std::to_string(header.size()) + " fields, got " +
                        std::to_string(fields.size()));
    }
    std::vector<double> row;
    for (const auto& f : fields) row.push_back(parse_number(f, line_no));
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw FormatError(path.string() + ": no data rows");

  Dataset d;
  d.task = TaskKind::Regression;
  const auto n = static_cast<Index>(rows.size());
  const auto dim = static_cast<Index>(header.size() - 1);
  d.inputs.resize(n, dim);
  d.targets.resize(n, 1);
  for (Index i = 0; i < n; ++i) {
    Index j = 0;
    for (std::size_t c = 0; c < header.size(); ++c) {
      const double v = rows[static_cast<std::size_t>(i)][c];
      if (c == target) {
        d.targets(i, 0) = v;
      } else {
        d.inputs(i, j++) = v;
      }
    }
  }
  set_identity_stats(d);
  return d;
}

namespace {

std::vector<unsigned char> read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t big_endian_u32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

}  // namespace

Dataset load_idx(const fs::path& images, const fs::path& labels, std::size_t limit) {
  if (limit == 0) throw std::invalid_argument("load_idx: limit must be positive");
  const auto img = read_file(images);
  const auto lab = read_file(labels);
  if (img.size() < 16 || big_endian_u32(img, 0) != 0x00000803) {
    throw FormatError(images.string() + ": not an IDX3 ubyte image file");
  }
  if (lab.size() < 8 || big_endian_u32(lab, 0) != 0x00000801) {
    throw FormatError(labels.string() + ": not an IDX1 ubyte label file");
  }
  const std::size_t count = big_endian_u32(img, 4);
  const std::size_t rows = big_endian_u32(img, 8);
  const std::size_t cols = big_endian_u32(img, 12);
  const std::size_t label_count = big_endian_u32(lab, 4);
  if (count != label_count) {
    throw FormatError("IDX image count " + std::to_string(count) +
                      " does not match label count " + std::to_string(label_count));
  }
  if (img.size() != 16 + count * rows * cols || lab.size() != 8 + count) {
    throw FormatError("IDX payload size disagrees with its header dimensions");
  }
  const std::size_t n = std::min(limit, count);
  const std::size_t pixels = rows * cols;
  Dataset d;
  d.task = TaskKind::Classification;
  d.num_classes = 10;
  d.inputs.resize(static_cast<Index>(n), static_cast<Index>(pixels));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < pixels; ++p) {
      d.inputs(static_cast<Index>(i), static_cast<Index>(p)) =
          img[16 + i * pixels + p] / 255.0;
    }
    const int label = lab[8 + i];
    if (label > 9) throw FormatError("IDX label " + std::to_string(label) + " out of range");
    d.labels.push_back(label);
  }
  set_identity_stats(d);
  return d;
}

Standardizer fit_standardizer(const Matrix& inputs) {
  Standardizer s;
  const double n = static_cast<double>(inputs.rows());
  s.mean = inputs.colwise().mean().transpose();
  s.std.resize(inputs.cols());
  for (Index j = 0; j < inputs.cols(); ++j) {
    const double var = (inputs.col(j).array() - s.mean[j]).square().sum() / n;
    s.std[j] = var > 0.0 ? std::sqrt(var) : 1.0;
  }
  return s;
}

Matrix apply_standardizer(const Standardizer& s, const Matrix& inputs) {
  return (inputs.rowwise() - s.mean.transpose()).array().rowwise() /
         s.std.transpose().array();
}

Splits split(const Dataset& data, const SplitSpec& spec) {
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 ||
      std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-12) {
    throw std::invalid_argument("split fractions must be non-negative and sum to 1");
  }
  const auto n = static_cast<std::size_t>(data.size());
  RngStream rng(spec.seed, 0x5917);
  const auto order = permutation(n, rng);
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train,
                              static_cast<std::size_t>(std::llround(spec.val * static_cast<double>(n))));
  if (n_train == 0) throw std::invalid_argument("split leaves the train part empty");

  // Each part keeps the original row order.
  auto take = [&](std::size_t from, std::size_t to) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(from),
                                 order.begin() + static_cast<std::ptrdiff_t>(to));
    std::sort(idx.begin(), idx.end());
    return data.subset(idx);
  };
  Splits out{take(0, n_train), take(n_train, n_train + n_val), take(n_train + n_val, n)};
  const Standardizer s = fit_standardizer(out.train.inputs);
  for (Dataset* part : {&out.train, &out.val, &out.test}) {
    if (part->size() > 0) part->inputs = apply_standardizer(s, part->inputs);
    part->feature_mean = s.mean;
    part->feature_std = s.std;
  }
  return out;
}

}  // namespace ocd
