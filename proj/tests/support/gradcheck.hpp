// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference gradient oracle, independent of the backward pass it
// checks: the numeric side only ever reads forward values.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "distillab/tensor.hpp"

namespace gradcheck {

using distillab::ByteMask;
using distillab::IdMatrix;
using distillab::OpAttrs;
using distillab::OpKind;
using distillab::Rng;
using distillab::Shape;
using distillab::TensorD;

struct OpInstance {
  OpKind op;
  std::vector<Shape> input_shapes;
  std::vector<std::vector<double>> inputs;
  OpAttrs<double> attrs;
  IdMatrix ids;
  ByteMask mask;
  std::vector<double> weights;  // fixed projection of the output to a scalar
};

inline std::vector<double> rand_entries(Rng& rng, int64_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = u(rng);
  return v;
}

inline int64_t rand_dim(Rng& rng, int64_t lo = 1, int64_t hi = 5) {
  std::uniform_int_distribution<int64_t> u(lo, hi);
  return u(rng);
}

// Builds a random instance of the given op with dims <= 5, entries ~U(-1,1).
inline OpInstance make_instance(OpKind op, Rng& rng) {
  OpInstance inst;
  inst.op = op;
  auto push = [&](Shape s, std::vector<double> v) {
    inst.input_shapes.push_back(std::move(s));
    inst.inputs.push_back(std::move(v));
  };
  switch (op) {
    case OpKind::matmul: {
      int64_t variant = rand_dim(rng, 0, 2);
      int64_t m = rand_dim(rng, 1, 4), k = rand_dim(rng, 1, 4), n = rand_dim(rng, 1, 4);
      int64_t b = rand_dim(rng, 1, 3);
      if (variant == 0) {
        push({m, k}, rand_entries(rng, m * k));
        push({k, n}, rand_entries(rng, k * n));
      } else if (variant == 1) {
        push({b, m, k}, rand_entries(rng, b * m * k));
        push({k, n}, rand_entries(rng, k * n));
      } else {
        push({b, m, k}, rand_entries(rng, b * m * k));
        push({b, k, n}, rand_entries(rng, b * k * n));
      }
      break;
    }
    case OpKind::add: {
      int64_t r = rand_dim(rng, 1, 5), d = rand_dim(rng, 1, 5);
      push({r, d}, rand_entries(rng, r * d));
      if (rand_dim(rng, 0, 1) == 0) {
        push({r, d}, rand_entries(rng, r * d));
      } else {
        push({d}, rand_entries(rng, d));  // trailing bias broadcast
      }
      break;
    }
    case OpKind::mul: {
      int64_t r = rand_dim(rng, 1, 5), d = rand_dim(rng, 1, 5);
      push({r, d}, rand_entries(rng, r * d));
      push({r, d}, rand_entries(rng, r * d));
      break;
    }
    case OpKind::scale: {
      int64_t n = rand_dim(rng, 1, 5) * rand_dim(rng, 1, 5);
      push({n}, rand_entries(rng, n));
      inst.attrs.scalar = rand_entries(rng, 1, -2.0, 2.0)[0];
      break;
    }
    case OpKind::transpose: {
      int64_t b = rand_dim(rng, 1, 3), r = rand_dim(rng, 1, 5), c = rand_dim(rng, 1, 5);
      push({b, r, c}, rand_entries(rng, b * r * c));
      // sometimes a non-trailing axis pair
      if (rand_dim(rng, 0, 1) == 1) {
        inst.attrs.axis0 = 0;
        inst.attrs.axis1 = rand_dim(rng, 1, 2);
      }
      break;
    }
    case OpKind::reshape: {
      int64_t r = rand_dim(rng, 1, 5), d = rand_dim(rng, 1, 5);
      push({r, d}, rand_entries(rng, r * d));
      inst.attrs.shape = {r * d};
      break;
    }
    case OpKind::concat: {
      int64_t r1 = rand_dim(rng, 1, 4), r2 = rand_dim(rng, 1, 4), d = rand_dim(rng, 1, 4);
      int64_t axis = rand_dim(rng, 0, 1);
      if (axis == 0) {
        push({r1, d}, rand_entries(rng, r1 * d));
        push({r2, d}, rand_entries(rng, r2 * d));
      } else {
        push({r1, d}, rand_entries(rng, r1 * d));
        push({r1, r2}, rand_entries(rng, r1 * r2));
      }
      inst.attrs.axis = axis;
      break;
    }
    case OpKind::embedding_gather: {
      int64_t v = rand_dim(rng, 2, 5), d = rand_dim(rng, 1, 5);
      int64_t rows = rand_dim(rng, 1, 3), cols = rand_dim(rng, 1, 4);
      push({v, d}, rand_entries(rng, v * d));
      inst.ids = IdMatrix(rows, cols);
      std::uniform_int_distribution<int32_t> uid(0, static_cast<int32_t>(v - 1));
      for (auto& id : inst.ids.v) id = uid(rng);
      break;
    }
    case OpKind::softmax:
    case OpKind::log_softmax: {
      int64_t r = rand_dim(rng, 1, 4), d = rand_dim(rng, 2, 5);
      push({r, d}, rand_entries(rng, r * d));
      break;
    }
    case OpKind::layer_norm: {
      int64_t r = rand_dim(rng, 1, 4), d = rand_dim(rng, 2, 5);
      push({r, d}, rand_entries(rng, r * d));
      push({d}, rand_entries(rng, d));
      push({d}, rand_entries(rng, d));
      break;
    }
    case OpKind::relu: {
      // keep entries away from the kink so central differences are valid
      int64_t n = rand_dim(rng, 1, 5) * rand_dim(rng, 1, 5);
      std::vector<double> v = rand_entries(rng, n);
      for (auto& x : v) {
        if (std::abs(x) < 0.01) x = x < 0 ? x - 0.01 : x + 0.01;
      }
      push({n}, std::move(v));
      break;
    }
    case OpKind::dropout: {
      int64_t n = rand_dim(rng, 2, 5) * rand_dim(rng, 1, 5);
      push({n}, rand_entries(rng, n));
      inst.attrs.p = 0.3;
      inst.attrs.seed = rng();
      inst.attrs.training = true;
      break;
    }
    case OpKind::sum:
    case OpKind::mean: {
      int64_t r = rand_dim(rng, 1, 5), d = rand_dim(rng, 1, 5);
      push({r, d}, rand_entries(rng, r * d));
      break;
    }
    case OpKind::masked_fill: {
      int64_t r = rand_dim(rng, 1, 5), d = rand_dim(rng, 1, 5);
      push({r, d}, rand_entries(rng, r * d));
      inst.mask = ByteMask(Shape{r, d});
      std::uniform_real_distribution<double> u(0.0, 1.0);
      for (auto& b : inst.mask.v) b = u(rng) < 0.3 ? 1 : 0;
      inst.attrs.scalar = 0.5;
      break;
    }
    case OpKind::sigmoid:
    case OpKind::exp: {
      int64_t n = rand_dim(rng, 1, 5) * rand_dim(rng, 1, 5);
      push({n}, rand_entries(rng, n));
      break;
    }
    case OpKind::log: {
      int64_t n = rand_dim(rng, 1, 5) * rand_dim(rng, 1, 5);
      push({n}, rand_entries(rng, n, 0.1, 2.0));
      break;
    }
    case OpKind::leaf:
      break;
  }
  inst.attrs.ids = &inst.ids;
  inst.attrs.mask = &inst.mask;
  return inst;
}

// Forward value of the projected scalar loss, no graph involved.
inline double forward_loss(const OpInstance& inst, const std::vector<std::vector<double>>& xs) {
  distillab::NoGradGuard ng;
  OpAttrs<double> attrs = inst.attrs;
  attrs.ids = &inst.ids;
  attrs.mask = &inst.mask;
  std::vector<TensorD> in;
  for (size_t i = 0; i < xs.size(); ++i) in.push_back(TensorD::from(inst.input_shapes[i], xs[i]));
  TensorD out = distillab::apply(inst.op, in, attrs);
  double loss = 0;
  for (size_t i = 0; i < out.values().size(); ++i) loss += out.values()[i] * inst.weights[i];
  return loss;
}

struct CheckResult {
  bool ok = true;
  std::string detail;
};

// Central-difference comparison; rel tol 1e-4, abs floor 1e-7 below 1e-4.
inline CheckResult check_instance(OpInstance& inst, Rng& rng, double h = 1e-5,
                                  double rel_tol = 1e-4, double abs_tol = 1e-7) {
  OpAttrs<double> attrs = inst.attrs;
  attrs.ids = &inst.ids;
  attrs.mask = &inst.mask;

  std::vector<TensorD> in;
  for (size_t i = 0; i < inst.inputs.size(); ++i) {
    in.push_back(TensorD::from(inst.input_shapes[i], inst.inputs[i]));
    in.back().set_requires_grad(true);
  }
  TensorD out = distillab::apply(inst.op, in, attrs);
  if (inst.weights.empty()) inst.weights = rand_entries(rng, out.numel());

  TensorD w = TensorD::from(out.shape(), inst.weights);
  TensorD loss = distillab::sum(distillab::mul(out, w));
  loss.backward();

  for (size_t ti = 0; ti < in.size(); ++ti) {
    const std::vector<double>& analytic = in[ti].grad();
    for (size_t e = 0; e < inst.inputs[ti].size(); ++e) {
      std::vector<std::vector<double>> xs = inst.inputs;
      xs[ti][e] += h;
      double fp = forward_loss(inst, xs);
      xs[ti][e] -= 2 * h;
      double fm = forward_loss(inst, xs);
      double num = (fp - fm) / (2 * h);
      double ana = analytic[e];
      double denom = std::max(std::abs(ana), std::abs(num));
      bool ok;
      if (denom < 1e-4) {
        ok = std::abs(ana - num) <= abs_tol * 10;  // both tiny
      } else {
        ok = std::abs(ana - num) / denom <= rel_tol;
      }
      if (!ok) {
        CheckResult r;
        r.ok = false;
        r.detail = std::string(distillab::op_name(inst.op)) + " input " + std::to_string(ti) +
                   " elem " + std::to_string(e) + ": analytic " + std::to_string(ana) +
                   " vs numeric " + std::to_string(num);
        return r;
      }
    }
  }
  return {};
}

inline std::vector<OpKind> all_differentiable_ops() {
  return {OpKind::matmul,    OpKind::add,        OpKind::mul,
          OpKind::scale,     OpKind::transpose,  OpKind::reshape,
          OpKind::concat,    OpKind::embedding_gather, OpKind::softmax,
          OpKind::log_softmax, OpKind::layer_norm, OpKind::relu,
          OpKind::dropout,   OpKind::sum,        OpKind::mean,
          OpKind::masked_fill, OpKind::sigmoid,  OpKind::exp,
          OpKind::log};
}

// Runs n random instances per op; returns the first failure description, or
// empty string when everything agrees.
inline std::string run_suite(int n_per_op, uint64_t seed) {
  Rng rng(seed);
  for (OpKind op : all_differentiable_ops()) {
    for (int i = 0; i < n_per_op; ++i) {
      OpInstance inst = make_instance(op, rng);
      CheckResult r = check_instance(inst, rng);
      if (!r.ok) return r.detail;
    }
  }
  return {};
}

}  // namespace gradcheck
