#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "slottok/ad.hpp"
#include "slottok/rng.hpp"
#include "slottok/synthdata.hpp"

namespace testutil {

using slottok::Rng;
using slottok::ad::Graph;
using slottok::ad::Mat;
using slottok::ad::Tensor;
using slottok::ad::Var;

inline Mat random_mat(int r, int c, Rng& rng, double scale = 1.0) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = scale * rng.gaussian();
  return m;
}

// Central-difference gradient check. `build` must construct the loss from the
// tensors' current values. Returns the maximum relative error over all swept
// entries (every entry when stride == 1).
inline double max_rel_grad_error(const std::function<Var(Graph&)>& build,
                                 const std::vector<Tensor*>& params,
                                 int stride = 1, double h = 1e-5) {
  for (auto* t : params) t->zero_grad();
  {
    Graph g;
    Var loss = build(g);
    g.backward(loss);
    g.accumulate_param_grads();
  }
  auto eval = [&]() {
    Graph g;
    return g.val(build(g))(0, 0);
  };
  double worst = 0.0;
  for (auto* t : params) {
    for (Eigen::Index i = 0; i < t->value.size(); i += stride) {
      double* p = t->value.data() + i;
      const double saved = *p;
      *p = saved + h;
      const double up = eval();
      *p = saved - h;
      const double dn = eval();
      *p = saved;
      const double numeric = (up - dn) / (2.0 * h);
      const double analytic = t->grad.data()[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
  }
  for (auto* t : params) t->zero_grad();
  return worst;
}

inline slottok::synth::SceneSample tiny_scene(std::uint64_t seed, int objects = 1,
                                              int canvas = 64) {
  auto vocab = slottok::synth::Vocabulary::standard();
  auto spec = slottok::synth::SceneSpec::defaults(seed, objects);
  spec.canvas_h = spec.canvas_w = canvas;
  return slottok::synth::generate_scene(spec, vocab);
}

}  // namespace testutil
