#pragma once

// Hand-built record stores with a known answer.

#include "ocd/overfit.hpp"
#include "ocd/rng.hpp"

namespace ocd::testing {

struct AtomPair {
  Matrix a, b;  // orthogonal, unit Frobenius norm
};

inline AtomPair make_atoms(Index rows, Index cols, std::uint64_t seed) {
  RngStream r(seed, 0);
  AtomPair p{r.gaussian_matrix(rows, cols), r.gaussian_matrix(rows, cols)};
  p.a /= p.a.norm();
  p.b -= p.b.cwiseProduct(p.a).sum() * p.a;
  p.b /= p.b.norm();
  return p;
}

/// Records whose delta is atom a when x[0] > 0 and atom b otherwise. The
/// conditioning tuple carries x[0] and x[1] and a one-hot of the side.
inline RecordStore two_atom_corpus(const AtomPair& atoms, Index n, std::uint64_t seed) {
  const Index rows = atoms.a.rows(), cols = atoms.a.cols();
  RecordStore st;
  auto& m = st.manifest;
  m.layer = 0;
  m.input_dim = 2;
  m.layer_in = cols - 1;
  m.layer_out = rows;
  m.output_dim = 2;
  m.base_checksum = "two-atom";
  RngStream g(seed, 0);
  for (Index i = 0; i < n; ++i) {
    const Vector x = g.gaussian_vector(2);
    const bool first = x[0] > 0.0;
    OverfitRecord rec;
    rec.sample_index = static_cast<std::size_t>(i);
    rec.x = x;
    Vector out(2);
    out << (first ? 1.0 : 0.0), (first ? 0.0 : 1.0);
    rec.cond = {Vector::Constant(cols - 1, x[0]), Vector::Constant(rows, x[1]), out};
    rec.delta_norm = first ? atoms.a : atoms.b;
    rec.rho = 1.0;
    st.records.push_back(rec);
  }
  m.num_records = n;
  return st;
}

}  // namespace ocd::testing
