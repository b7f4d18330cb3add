/*
 * Copyright 2026 The fsvlm Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "fsvlm/autograd.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <unordered_set>

#include "fsvlm/error.hpp"

namespace fsvlm::nn {

namespace {

using NodePtr = std::shared_ptr<Node>;

template <typename Derived>
void accumulate(const NodePtr& p, const Eigen::MatrixBase<Derived>& g) {
  if (!p->requires_grad) return;
  if (p->grad.size() == 0) {
    p->grad = g;
  } else {
    p->grad += g;
  }
}

Var make(Matrix value, std::vector<NodePtr> parents, std::function<void(Node&)> bw) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  for (const auto& p : parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(bw);
  }
  return Var(std::move(n));
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var leaf(Parameter& p, const Context& ctx) {
  auto n = std::make_shared<Node>();
  n->external = &p.value;
  n->requires_grad = ctx.grad && p.trainable;
  n->param = &p;
  return Var(std::move(n));
}

void backward(const Var& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw DimensionError("backward: loss must be 1x1");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad = Matrix::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->grad.size() == 0) continue;
    if (n->backward) n->backward(*n);
    if (n->param != nullptr) {
      if (n->param->grad.size() == 0) {
        n->param->grad = n->grad;
      } else {
        n->param->grad += n->grad;
      }
    }
    if (!n->parents.empty()) n->grad.resize(0, 0);
  }
}

Activation parse_activation(const std::string& name) {
  if (name == "gelu") return Activation::kGelu;
  if (name == "relu") return Activation::kRelu;
  if (name == "silu") return Activation::kSilu;
  if (name == "quick_gelu") return Activation::kQuickGelu;
  throw ConfigError("unknown activation '" + name + "'");
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::kGelu: return "gelu";
    case Activation::kRelu: return "relu";
    case Activation::kSilu: return "silu";
    case Activation::kQuickGelu: return "quick_gelu";
  }
  return "gelu";
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  return make(a.value() + b.value(), {a.node(), b.node()}, [](Node& self) {
    accumulate(self.parents[0], self.grad);
    accumulate(self.parents[1], self.grad);
  });
}

Var scale(const Var& a, double s) {
  return make(a.value() * s, {a.node()},
              [s](Node& self) { accumulate(self.parents[0], self.grad * s); });
}

Var scale_by(const Var& a, const Var& s) {
  if (s.rows() != 1 || s.cols() != 1) throw DimensionError("scale_by: scale must be 1x1");
  return make(a.value() * s.scalar(), {a.node(), s.node()}, [](Node& self) {
    const auto& av = self.parents[0]->val();
    const double sv = self.parents[1]->val()(0, 0);
    accumulate(self.parents[0], self.grad * sv);
    Matrix ds(1, 1);
    ds(0, 0) = self.grad.cwiseProduct(av).sum();
    accumulate(self.parents[1], ds);
  });
}

Var exp(const Var& a) {
  Matrix y = a.value().array().exp().matrix();
  return make(y, {a.node()}, [](Node& self) {
    accumulate(self.parents[0], self.grad.cwiseProduct(self.value));
  });
}

Var linear(const Var& x, const Var& w, const Var* b) {
  if (x.cols() != w.cols()) {
    throw DimensionError("linear: input width " + std::to_string(x.cols()) +
                         " does not match weight " + std::to_string(w.rows()) + "x" +
                         std::to_string(w.cols()));
  }
  Matrix y = x.value() * w.value().transpose();
  std::vector<NodePtr> parents{x.node(), w.node()};
  if (b != nullptr) {
    if (b->rows() != 1 || b->cols() != w.rows()) throw DimensionError("linear: bad bias shape");
    y.rowwise() += b->value().row(0);
    parents.push_back(b->node());
  }
  return make(std::move(y), std::move(parents), [](Node& self) {
    const auto& xv = self.parents[0]->val();
    const auto& wv = self.parents[1]->val();
    if (self.parents[0]->requires_grad) accumulate(self.parents[0], self.grad * wv);
    if (self.parents[1]->requires_grad) accumulate(self.parents[1], self.grad.transpose() * xv);
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      accumulate(self.parents[2], self.grad.colwise().sum());
    }
  });
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  return make(a.value() * b.value(), {a.node(), b.node()}, [](Node& self) {
    const auto& av = self.parents[0]->val();
    const auto& bv = self.parents[1]->val();
    if (self.parents[0]->requires_grad) accumulate(self.parents[0], self.grad * bv.transpose());
    if (self.parents[1]->requires_grad) accumulate(self.parents[1], av.transpose() * self.grad);
  });
}

Var matmul_bt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) throw DimensionError("matmul_bt: embedding widths differ");
  return make(a.value() * b.value().transpose(), {a.node(), b.node()}, [](Node& self) {
    const auto& av = self.parents[0]->val();
    const auto& bv = self.parents[1]->val();
    if (self.parents[0]->requires_grad) accumulate(self.parents[0], self.grad * bv);
    if (self.parents[1]->requires_grad) accumulate(self.parents[1], self.grad.transpose() * av);
  });
}

Var activation(const Var& x, Activation kind) {
  const Matrix& xv = x.value();
  Matrix y(xv.rows(), xv.cols());
  Matrix dydx(xv.rows(), xv.cols());
  for (Eigen::Index i = 0; i < xv.size(); ++i) {
    const double v = xv.data()[i];
    double out = 0, d = 0;
    switch (kind) {
      case Activation::kGelu: {
        const double cdf = normal_cdf(v);
        out = v * cdf;
        d = cdf + v * normal_pdf(v);
        break;
      }
      case Activation::kRelu:
        out = v > 0 ? v : 0.0;
        d = v > 0 ? 1.0 : 0.0;
        break;
      case Activation::kSilu: {
        const double s = sigmoid(v);
        out = v * s;
        d = s * (1.0 + v * (1.0 - s));
        break;
      }
      case Activation::kQuickGelu: {
        const double s = sigmoid(1.702 * v);
        out = v * s;
        d = s + 1.702 * v * s * (1.0 - s);
        break;
      }
    }
    y.data()[i] = out;
    dydx.data()[i] = d;
  }
  return make(std::move(y), {x.node()}, [dydx = std::move(dydx)](Node& self) {
    accumulate(self.parents[0], self.grad.cwiseProduct(dydx));
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Matrix& xv = x.value();
  const auto n = xv.cols();
  if (gamma.cols() != n || beta.cols() != n) throw DimensionError("layer_norm: bad affine shape");
  Matrix xhat(xv.rows(), n);
  Eigen::VectorXd rstd(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    rstd(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * rstd(r);
  }
  Matrix y = xhat;
  y.array().rowwise() *= gamma.value().row(0).array();
  y.rowwise() += beta.value().row(0);
  return make(std::move(y), {x.node(), gamma.node(), beta.node()},
              [xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                const auto& g = self.grad;
                const auto& gam = self.parents[1]->val();
                if (self.parents[0]->requires_grad) {
                  Matrix dxhat = g;
                  dxhat.array().rowwise() *= gam.row(0).array();
                  Matrix dx(g.rows(), g.cols());
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    const double m1 = dxhat.row(r).mean();
                    const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                    dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * rstd(r);
                  }
                  accumulate(self.parents[0], dx);
                }
                if (self.parents[1]->requires_grad) {
                  accumulate(self.parents[1], g.cwiseProduct(xhat).colwise().sum());
                }
                if (self.parents[2]->requires_grad) accumulate(self.parents[2], g.colwise().sum());
              });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, RowVector& running_mean,
               RowVector& running_var, const Context& ctx, double momentum, double eps) {
  const Matrix& xv = x.value();
  const auto n = xv.rows();
  const auto c = xv.cols();
  if (gamma.cols() != c || beta.cols() != c || running_mean.cols() != c) {
    throw DimensionError("batch_norm: bad parameter shape");
  }
  RowVector mean, var;
  if (ctx.training) {
    mean = xv.colwise().mean();
    var = (xv.rowwise() - mean).array().square().colwise().mean().matrix();
    const double unbias = n > 1 ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
    running_mean = (1.0 - momentum) * running_mean + momentum * mean;
    running_var = (1.0 - momentum) * running_var + momentum * (var * unbias);
  } else {
    mean = running_mean;
    var = running_var;
  }
  RowVector rstd = (var.array() + eps).rsqrt().matrix();
  Matrix xhat = (xv.rowwise() - mean);
  xhat.array().rowwise() *= rstd.array();
  Matrix y = xhat;
  y.array().rowwise() *= gamma.value().row(0).array();
  y.rowwise() += beta.value().row(0);
  const bool batch_stats = ctx.training;
  return make(std::move(y), {x.node(), gamma.node(), beta.node()},
              [xhat = std::move(xhat), rstd = std::move(rstd), batch_stats](Node& self) {
                const auto& g = self.grad;
                const auto& gam = self.parents[1]->val();
                if (self.parents[0]->requires_grad) {
                  Matrix dxhat = g;
                  dxhat.array().rowwise() *= gam.row(0).array();
                  Matrix dx;
                  if (batch_stats) {
                    const RowVector m1 = dxhat.colwise().mean();
                    const RowVector m2 = dxhat.cwiseProduct(xhat).colwise().mean();
                    dx = dxhat.rowwise() - m1;
                    dx -= (xhat.array().rowwise() * m2.array()).matrix();
                    dx.array().rowwise() *= rstd.array();
                  } else {
                    dx = dxhat;
                    dx.array().rowwise() *= rstd.array();
                  }
                  accumulate(self.parents[0], dx);
                }
                if (self.parents[1]->requires_grad) {
                  accumulate(self.parents[1], g.cwiseProduct(xhat).colwise().sum());
                }
                if (self.parents[2]->requires_grad) accumulate(self.parents[2], g.colwise().sum());
              });
}

Var multi_head_attention(const Var& q, const Var& k, const Var& v, int heads,
                         std::span<const Segment> segments, bool causal) {
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  require_same_shape(Q, K, "attention");
  require_same_shape(Q, V, "attention");
  if (heads < 1 || Q.cols() % heads != 0) throw DimensionError("attention: width not divisible by heads");
  const Eigen::Index hd = Q.cols() / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  Matrix out = Matrix::Zero(Q.rows(), Q.cols());
  std::vector<Matrix> probs;
  probs.reserve(segments.size() * heads);
  for (const auto& seg : segments) {
    for (int h = 0; h < heads; ++h) {
      const auto Qs = Q.block(seg.start, h * hd, seg.length, hd);
      const auto Ks = K.block(seg.start, h * hd, seg.length, hd);
      const auto Vs = V.block(seg.start, h * hd, seg.length, hd);
      Matrix S = (Qs * Ks.transpose()) * inv_sqrt;
      if (causal) {
        for (Eigen::Index i = 0; i < S.rows(); ++i) {
          for (Eigen::Index j = i + 1; j < S.cols(); ++j) S(i, j) = -std::numeric_limits<double>::infinity();
        }
      }
      Matrix P = softmax_rows(S);
      out.block(seg.start, h * hd, seg.length, hd) = P * Vs;
      probs.push_back(std::move(P));
    }
  }
  std::vector<Segment> segs(segments.begin(), segments.end());
  return make(std::move(out), {q.node(), k.node(), v.node()},
              [probs = std::move(probs), segs = std::move(segs), heads, hd, inv_sqrt](Node& self) {
                const auto& Qv = self.parents[0]->val();
                const auto& Kv = self.parents[1]->val();
                const auto& Vv = self.parents[2]->val();
                Matrix dQ = Matrix::Zero(Qv.rows(), Qv.cols());
                Matrix dK = Matrix::Zero(Qv.rows(), Qv.cols());
                Matrix dV = Matrix::Zero(Qv.rows(), Qv.cols());
                std::size_t idx = 0;
                for (const auto& seg : segs) {
                  for (int h = 0; h < heads; ++h, ++idx) {
                    const Matrix& P = probs[idx];
                    const auto dO = self.grad.block(seg.start, h * hd, seg.length, hd);
                    const auto Qs = Qv.block(seg.start, h * hd, seg.length, hd);
                    const auto Ks = Kv.block(seg.start, h * hd, seg.length, hd);
                    const auto Vs = Vv.block(seg.start, h * hd, seg.length, hd);
                    dV.block(seg.start, h * hd, seg.length, hd) += P.transpose() * dO;
                    Matrix dP = dO * Vs.transpose();
                    Eigen::VectorXd rowdot = dP.cwiseProduct(P).rowwise().sum();
                    Matrix dS = P.cwiseProduct(dP.colwise() - rowdot) * inv_sqrt;
                    dQ.block(seg.start, h * hd, seg.length, hd) += dS * Ks;
                    dK.block(seg.start, h * hd, seg.length, hd) += dS.transpose() * Qs;
                  }
                }
                accumulate(self.parents[0], dQ);
                accumulate(self.parents[1], dK);
                accumulate(self.parents[2], dV);
              });
}

Var gather_rows(const Var& table, std::vector<Eigen::Index> indices) {
  const Matrix& t = table.value();
  Matrix out(static_cast<Eigen::Index>(indices.size()), t.cols());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] < 0 || indices[i] >= t.rows()) throw RangeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = t.row(indices[i]);
  }
  return make(std::move(out), {table.node()}, [indices = std::move(indices)](Node& self) {
    const auto& tv = self.parents[0]->val();
    Matrix g = Matrix::Zero(tv.rows(), tv.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      g.row(indices[i]) += self.grad.row(static_cast<Eigen::Index>(i));
    }
    accumulate(self.parents[0], g);
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
  Eigen::Index rows = 0;
  const auto cols = parts.front().cols();
  std::vector<NodePtr> parents;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column counts differ");
    rows += p.rows();
    parents.push_back(p.node());
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return make(std::move(out), std::move(parents), [](Node& self) {
    Eigen::Index r0 = 0;
    for (const auto& p : self.parents) {
      const auto n = p->val().rows();
      if (p->requires_grad) accumulate(p, self.grad.middleRows(r0, n));
      r0 += n;
    }
  });
}

Var l2_normalize_rows(const Var& x) {
  const Matrix& xv = x.value();
  Eigen::VectorXd norms = xv.rowwise().norm();
  for (Eigen::Index r = 0; r < norms.size(); ++r) {
    // Non-finite rows pass through so callers can report where they came from.
    if (norms(r) == 0.0) throw DimensionError("l2_normalize_rows: row " + std::to_string(r) + " has zero norm");
  }
  Matrix y = xv.array().colwise() / norms.array();
  return make(y, {x.node()}, [norms = std::move(norms)](Node& self) {
    const Matrix& yv = self.value;
    Eigen::VectorXd dots = yv.cwiseProduct(self.grad).rowwise().sum();
    Matrix dx = self.grad - (yv.array().colwise() * dots.array()).matrix();
    dx.array().colwise() /= norms.array();
    accumulate(self.parents[0], dx);
  });
}

Var cross_entropy(const Var& logits, std::span<const int> labels) {
  const Matrix& z = logits.value();
  if (static_cast<Eigen::Index>(labels.size()) != z.rows()) {
    throw DimensionError("cross_entropy: label count differs from rows");
  }
  Matrix p = softmax_rows(z);
  double loss = 0;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= z.cols()) throw RangeError("cross_entropy: label out of range");
    const double m = z.row(i).maxCoeff();
    const double lse = m + std::log((z.row(i).array() - m).exp().sum());
    loss += lse - z(i, y);
  }
  const double n = static_cast<double>(z.rows());
  Matrix out(1, 1);
  out(0, 0) = loss / n;
  std::vector<int> ys(labels.begin(), labels.end());
  return make(std::move(out), {logits.node()}, [p = std::move(p), ys = std::move(ys), n](Node& self) {
    Matrix g = p;
    for (std::size_t i = 0; i < ys.size(); ++i) g(static_cast<Eigen::Index>(i), ys[i]) -= 1.0;
    g *= self.grad(0, 0) / n;
    accumulate(self.parents[0], g);
  });
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    p.row(i) = (logits.row(i).array() - m).exp().matrix();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace fsvlm::nn
