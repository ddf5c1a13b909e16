#include "vsum/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace vsum {

double cosine_plain(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    fail("shape_error", "cosine: length mismatch " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0)
    fail("degenerate_input", "cosine: zero-norm input");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

}  // namespace vsum

namespace vsum::ad {

int64_t shape_size(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from(std::move(shape), {}, requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  auto node = std::make_shared<Node>();
  int64_t n = shape_size(shape);
  if (n <= 0) fail("shape_error", "tensor extents must be positive: " + shape_str(shape));
  if (values.empty()) values.assign(static_cast<size_t>(n), 0.0);
  if (static_cast<int64_t>(values.size()) != n)
    fail("shape_error", "value count " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(shape));
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->values.size(), 0.0);
  return Tensor(std::move(node));
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  Shape shape{static_cast<int64_t>(values.size())};
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

double Tensor::item() const {
  if (size() != 1) fail("contract_error", "item() on non-scalar tensor " + shape_str(shape()));
  return node_->values[0];
}

void Tensor::zero_grad() {
  if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detached(bool requires_grad) const {
  return from(node_->shape, node_->values, requires_grad);
}

Tensor make_op(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
               std::function<void(Tensor::Node&)> backward_fn) {
  bool needs_grad = false;
  for (const Tensor& p : parents) needs_grad = needs_grad || p.requires_grad();
  Tensor out = Tensor::from(std::move(shape), std::move(values), needs_grad);
  if (needs_grad) {
    for (const Tensor& p : parents) out.node()->parents.push_back(p.handle());
    out.node()->backward_fn = std::move(backward_fn);
  }
  return out;
}

void backward(const Tensor& root) {
  if (root.size() != 1)
    fail("contract_error", "backward requires a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS so deep graphs cannot overflow the stack.
  std::vector<Tensor::Node*> order;
  std::unordered_set<Tensor::Node*> seen;
  std::vector<std::pair<Tensor::Node*, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Tensor::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    fail("shape_error", std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
}

// Treats 1-D tensors as a single row.
std::pair<int64_t, int64_t> rows_cols(const Tensor& t) {
  if (t.shape().size() == 1) return {1, t.shape()[0]};
  if (t.shape().size() == 2) return {t.shape()[0], t.shape()[1]};
  fail("shape_error", "expected 1-D or 2-D tensor, got " + shape_str(t.shape()));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
    fail("dimension_error", "matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t kk = 0; kk < k; ++kk) {
      const double aik = av[static_cast<size_t>(i * k + kk)];
      if (aik == 0.0) continue;
      const size_t brow = static_cast<size_t>(kk * n);
      const size_t crow = static_cast<size_t>(i * n);
      for (int64_t j = 0; j < n; ++j) out[crow + j] += aik * bv[brow + j];
    }

  auto ah = a.handle();
  auto bh = b.handle();
  return make_op({m, n}, std::move(out), {a, b}, [ah, bh, m, k, n](Tensor::Node& node) {
    const auto& g = node.grad;
    if (ah->requires_grad) {  // dA = dC * B^T
      for (int64_t i = 0; i < m; ++i)
        for (int64_t kk = 0; kk < k; ++kk) {
          double acc = 0.0;
          for (int64_t j = 0; j < n; ++j)
            acc += g[static_cast<size_t>(i * n + j)] * bh->values[static_cast<size_t>(kk * n + j)];
          ah->grad[static_cast<size_t>(i * k + kk)] += acc;
        }
    }
    if (bh->requires_grad) {  // dB = A^T * dC
      for (int64_t i = 0; i < m; ++i)
        for (int64_t kk = 0; kk < k; ++kk) {
          const double aik = ah->values[static_cast<size_t>(i * k + kk)];
          if (aik == 0.0) continue;
          const size_t grow = static_cast<size_t>(i * n);
          const size_t brow = static_cast<size_t>(kk * n);
          for (int64_t j = 0; j < n; ++j) bh->grad[brow + j] += aik * g[grow + j];
        }
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
  auto ah = a.handle();
  auto bh = b.handle();
  return make_op(a.shape(), std::move(out), {a, b}, [ah, bh](Tensor::Node& node) {
    if (ah->requires_grad)
      for (size_t i = 0; i < node.grad.size(); ++i) ah->grad[i] += node.grad[i];
    if (bh->requires_grad)
      for (size_t i = 0; i < node.grad.size(); ++i) bh->grad[i] += node.grad[i];
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
  auto ah = a.handle();
  auto bh = b.handle();
  return make_op(a.shape(), std::move(out), {a, b}, [ah, bh](Tensor::Node& node) {
    if (ah->requires_grad)
      for (size_t i = 0; i < node.grad.size(); ++i) ah->grad[i] += node.grad[i] * bh->values[i];
    if (bh->requires_grad)
      for (size_t i = 0; i < node.grad.size(); ++i) bh->grad[i] += node.grad[i] * ah->values[i];
  });
}

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= c;
  auto ah = a.handle();
  return make_op(a.shape(), std::move(out), {a}, [ah, c](Tensor::Node& node) {
    if (ah->requires_grad)
      for (size_t i = 0; i < node.grad.size(); ++i) ah->grad[i] += c * node.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  auto ah = a.handle();
  return make_op({1}, {s}, {a}, [ah](Tensor::Node& node) {
    if (ah->requires_grad)
      for (double& g : ah->grad) g += node.grad[0];
  });
}

Tensor tanh_op(const Tensor& a) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v = std::tanh(v);
  auto ah = a.handle();
  return make_op(a.shape(), std::move(out), {a}, [ah](Tensor::Node& node) {
    if (!ah->requires_grad) return;
    for (size_t i = 0; i < node.grad.size(); ++i)
      ah->grad[i] += node.grad[i] * (1.0 - node.values[i] * node.values[i]);
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  auto [rows, cols] = rows_cols(x);
  if (bias.shape().size() != 1 || bias.shape()[0] != cols)
    fail("shape_error", "add_bias: bias " + shape_str(bias.shape()) + " does not match width " +
                            std::to_string(cols));
  std::vector<double> out(x.values().begin(), x.values().end());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c)
      out[static_cast<size_t>(r * cols + c)] += bias.values()[static_cast<size_t>(c)];
  auto xh = x.handle();
  auto bh = bias.handle();
  return make_op(x.shape(), std::move(out), {x, bias}, [xh, bh, rows, cols](Tensor::Node& node) {
    if (xh->requires_grad)
      for (size_t i = 0; i < node.grad.size(); ++i) xh->grad[i] += node.grad[i];
    if (bh->requires_grad)
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c)
          bh->grad[static_cast<size_t>(c)] += node.grad[static_cast<size_t>(r * cols + c)];
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  constexpr double kEps = 1e-5;
  auto [rows, cols] = rows_cols(x);
  if (gain.shape().size() != 1 || gain.shape()[0] != cols || bias.shape() != gain.shape())
    fail("shape_error", "layer_norm: gain/bias must be 1-D of width " + std::to_string(cols));

  std::vector<double> out(static_cast<size_t>(rows * cols));
  std::vector<double> xhat(out.size());
  std::vector<double> inv_std(static_cast<size_t>(rows));
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  for (int64_t r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r * cols);
    double mean = 0.0;
    for (int64_t c = 0; c < cols; ++c) mean += xv[base + c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      const double d = xv[base + c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + kEps);
    inv_std[static_cast<size_t>(r)] = is;
    for (int64_t c = 0; c < cols; ++c) {
      const double h = (xv[base + c] - mean) * is;
      xhat[base + c] = h;
      out[base + c] = gv[static_cast<size_t>(c)] * h + bv[static_cast<size_t>(c)];
    }
  }

  auto xh = x.handle();
  auto gh = gain.handle();
  auto bh = bias.handle();
  return make_op(x.shape(), std::move(out), {x, gain, bias},
                 [xh, gh, bh, rows, cols, xhat = std::move(xhat),
                  inv_std = std::move(inv_std)](Tensor::Node& node) {
                   const auto& g = node.grad;
                   const double n = static_cast<double>(cols);
                   for (int64_t r = 0; r < rows; ++r) {
                     const size_t base = static_cast<size_t>(r * cols);
                     const double is = inv_std[static_cast<size_t>(r)];
                     // dL/dxhat, plus the two row reductions the x gradient needs.
                     double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                     for (int64_t c = 0; c < cols; ++c) {
                       const double dxh = g[base + c] * gh->values[static_cast<size_t>(c)];
                       sum_dxhat += dxh;
                       sum_dxhat_xhat += dxh * xhat[base + c];
                     }
                     if (xh->requires_grad) {
                       for (int64_t c = 0; c < cols; ++c) {
                         const double dxh = g[base + c] * gh->values[static_cast<size_t>(c)];
                         xh->grad[base + c] +=
                             is * (dxh - sum_dxhat / n - xhat[base + c] * sum_dxhat_xhat / n);
                       }
                     }
                     if (gh->requires_grad)
                       for (int64_t c = 0; c < cols; ++c)
                         gh->grad[static_cast<size_t>(c)] += g[base + c] * xhat[base + c];
                     if (bh->requires_grad)
                       for (int64_t c = 0; c < cols; ++c)
                         bh->grad[static_cast<size_t>(c)] += g[base + c];
                   }
                 });
}

Tensor softmax_rows(const Tensor& logits, double temperature) {
  if (temperature <= 0.0)
    fail("parameter_error", "softmax: temperature must be positive, got " +
                                std::to_string(temperature));
  auto [rows, cols] = rows_cols(logits);
  if (cols < 2) fail("shape_error", "softmax: need at least 2 classes, got " + std::to_string(cols));

  std::vector<double> out(static_cast<size_t>(rows * cols));
  const auto lv = logits.values();
  for (int64_t r = 0; r < rows; ++r) {
    const size_t base = static_cast<size_t>(r * cols);
    double mx = lv[base];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, lv[base + c]);
    double z = 0.0;
    for (int64_t c = 0; c < cols; ++c) {
      const double e = std::exp((lv[base + c] - mx) / temperature);
      out[base + c] = e;
      z += e;
    }
    for (int64_t c = 0; c < cols; ++c) out[base + c] /= z;
  }

  auto lh = logits.handle();
  return make_op(logits.shape(), std::move(out), {logits},
                 [lh, rows, cols, temperature](Tensor::Node& node) {
                   if (!lh->requires_grad) return;
                   for (int64_t r = 0; r < rows; ++r) {
                     const size_t base = static_cast<size_t>(r * cols);
                     double dot = 0.0;
                     for (int64_t c = 0; c < cols; ++c)
                       dot += node.grad[base + c] * node.values[base + c];
                     for (int64_t c = 0; c < cols; ++c)
                       lh->grad[base + c] += node.values[base + c] *
                                             (node.grad[base + c] - dot) / temperature;
                   }
                 });
}

Tensor cross_entropy_rows(const Tensor& probs, const std::vector<int>& gold) {
  auto [rows, cols] = rows_cols(probs);
  if (static_cast<int64_t>(gold.size()) != rows)
    fail("shape_error", "cross_entropy: " + std::to_string(gold.size()) + " labels for " +
                            std::to_string(rows) + " rows");
  for (int y : gold)
    if (y < 0 || y >= cols)
      fail("index_error", "cross_entropy: gold class " + std::to_string(y) +
                              " outside [0, " + std::to_string(cols) + ")");

  const auto pv = probs.values();
  double loss = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    const double p = std::max(pv[static_cast<size_t>(r * cols + gold[static_cast<size_t>(r)])],
                              kProbFloor);
    loss -= std::log(p);
  }
  loss /= static_cast<double>(rows);

  auto ph = probs.handle();
  return make_op({1}, {loss}, {probs}, [ph, rows, cols, gold](Tensor::Node& node) {
    if (!ph->requires_grad) return;
    const double g = node.grad[0] / static_cast<double>(rows);
    for (int64_t r = 0; r < rows; ++r) {
      const size_t idx = static_cast<size_t>(r * cols + gold[static_cast<size_t>(r)]);
      const double p = ph->values[idx];
      if (p > kProbFloor) ph->grad[idx] -= g / p;
    }
  });
}

Tensor kl_rows(const Tensor& p, const Tensor& q_const) {
  check_same_shape(p, q_const, "kl_divergence");
  auto [rows, cols] = rows_cols(p);
  const auto pv = p.values();
  const auto qv = q_const.values();
  double loss = 0.0;
  for (size_t i = 0; i < pv.size(); ++i) {
    const double pf = std::max(pv[i], kProbFloor);
    const double qf = std::max(qv[i], kProbFloor);
    loss += pf * std::log(pf / qf);
  }
  loss /= static_cast<double>(rows);

  auto ph = p.handle();
  auto qh = q_const.handle();
  return make_op({1}, {loss}, {p}, [ph, qh, rows](Tensor::Node& node) {
    if (!ph->requires_grad) return;
    const double g = node.grad[0] / static_cast<double>(rows);
    for (size_t i = 0; i < ph->values.size(); ++i) {
      const double pf = ph->values[i];
      if (pf <= kProbFloor) continue;
      const double qf = std::max(qh->values[i], kProbFloor);
      ph->grad[i] += g * (std::log(pf / qf) + 1.0);
    }
  });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 1 || b.shape().size() != 1)
    fail("shape_error", "cosine_similarity expects 1-D inputs");
  check_same_shape(a, b, "cosine_similarity");
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (size_t i = 0; i < a.values().size(); ++i) {
    dot += a.values()[i] * b.values()[i];
    na2 += a.values()[i] * a.values()[i];
    nb2 += b.values()[i] * b.values()[i];
  }
  if (na2 == 0.0 || nb2 == 0.0)
    fail("degenerate_input", "cosine_similarity: zero-norm input");
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  const double cosv = dot / (na * nb);

  auto ah = a.handle();
  auto bh = b.handle();
  return make_op({1}, {cosv}, {a, b}, [ah, bh, dot, na, nb, cosv](Tensor::Node& node) {
    const double g = node.grad[0];
    if (ah->requires_grad)
      for (size_t i = 0; i < ah->values.size(); ++i)
        ah->grad[i] += g * (bh->values[i] / (na * nb) - cosv * ah->values[i] / (na * na));
    if (bh->requires_grad)
      for (size_t i = 0; i < bh->values.size(); ++i)
        bh->grad[i] += g * (ah->values[i] / (na * nb) - cosv * bh->values[i] / (nb * nb));
  });
}

Distribution Distribution::from(std::vector<double> probs) {
  if (probs.size() < 2) fail("shape_error", "distribution needs K >= 2 classes");
  double s = 0.0;
  for (double p : probs) {
    if (p < 0.0 || p > 1.0) fail("parameter_error", "distribution prob outside [0,1]");
    s += p;
  }
  if (std::abs(s - 1.0) > 1e-9)
    fail("parameter_error", "distribution probs sum to " + std::to_string(s) + ", expected 1");
  return Distribution{Tensor::vector(std::move(probs))};
}

int Distribution::argmax() const {
  const auto v = probs.values();
  int best = 0;
  for (int i = 1; i < classes(); ++i)
    if (v[static_cast<size_t>(i)] > v[static_cast<size_t>(best)]) best = i;
  return best;
}

Distribution softmax(const Tensor& logits, double temperature) {
  if (logits.shape().size() != 1)
    fail("shape_error", "softmax expects a 1-D logits tensor, got " + shape_str(logits.shape()));
  return Distribution{softmax_rows(logits, temperature)};
}

Tensor cross_entropy(const Distribution& pred, int gold) {
  if (gold < 0 || gold >= pred.classes())
    fail("index_error", "cross_entropy: gold class " + std::to_string(gold) + " outside [0, " +
                            std::to_string(pred.classes()) + ")");
  return cross_entropy_rows(pred.probs, {gold});
}

Tensor kl_divergence(const Distribution& p, const Distribution& q) {
  if (p.classes() != q.classes())
    fail("shape_error", "kl_divergence: class count mismatch " + std::to_string(p.classes()) +
                            " vs " + std::to_string(q.classes()));
  return kl_rows(p.probs, q.probs);
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  if (eps < 1e-7 || eps > 1e-3)
    fail("parameter_error", "grad_check: eps must be in [1e-7, 1e-3], got " + std::to_string(eps));

  Tensor xc = x.detached(/*requires_grad=*/true);
  Tensor out = f(xc);
  if (out.size() != 1)
    fail("contract_error", "grad_check: f must return a scalar, got " + shape_str(out.shape()));
  backward(out);
  std::vector<double> analytic(xc.grad().begin(), xc.grad().end());

  double max_rel = 0.0;
  std::vector<double> base(x.values().begin(), x.values().end());
  for (size_t i = 0; i < base.size(); ++i) {
    std::vector<double> vp = base, vm = base;
    vp[i] += eps;
    vm[i] -= eps;
    const double fp = f(Tensor::from(x.shape(), vp)).item();
    const double fm = f(Tensor::from(x.shape(), vm)).item();
    const double numeric = (fp - fm) / (2.0 * eps);
    const double denom = std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace vsum::ad
