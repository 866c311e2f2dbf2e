#include "pmrl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace pmrl::ad {

namespace {

bool g_grad_enabled = true;

NodePtr make_node(Array v, const char* op, std::vector<NodePtr> parents) {
  auto n = std::make_shared<Node>(std::move(v));
  n->op = op;
  if (!g_grad_enabled) return n;
  bool needs = false;
  for (const auto& p : parents)
    if (p->needs_grad) needs = true;
  if (!needs) return n;
  n->needs_grad = true;
  n->parents = std::move(parents);
  return n;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

NodePtr constant(Array v) { return std::make_shared<Node>(std::move(v)); }
NodePtr constant(double v) { return constant(Array::scalar(v)); }

NodePtr param(Array v) {
  auto n = std::make_shared<Node>(std::move(v));
  n->requires_grad = true;
  n->needs_grad = true;
  n->op = "param";
  return n;
}

NodePtr add(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a->value, b->value, "add");
  Array v(a->value.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = a->value[i] + b->value[i];
  auto out = make_node(std::move(v), "add", {a, b});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a, b] {
      if (a->needs_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < o->grad.numel(); ++i)
          a->grad[i] += o->grad[i];
      }
      if (b->needs_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < o->grad.numel(); ++i)
          b->grad[i] += o->grad[i];
      }
    };
  }
  return out;
}

NodePtr sub(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a->value, b->value, "sub");
  Array v(a->value.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = a->value[i] - b->value[i];
  auto out = make_node(std::move(v), "sub", {a, b});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a, b] {
      if (a->needs_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < o->grad.numel(); ++i)
          a->grad[i] += o->grad[i];
      }
      if (b->needs_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < o->grad.numel(); ++i)
          b->grad[i] -= o->grad[i];
      }
    };
  }
  return out;
}

NodePtr mul(const NodePtr& a, const NodePtr& b) {
  check_same_shape(a->value, b->value, "mul");
  Array v(a->value.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = a->value[i] * b->value[i];
  auto out = make_node(std::move(v), "mul", {a, b});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a, b] {
      if (a->needs_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < o->grad.numel(); ++i)
          a->grad[i] += o->grad[i] * b->value[i];
      }
      if (b->needs_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < o->grad.numel(); ++i)
          b->grad[i] += o->grad[i] * a->value[i];
      }
    };
  }
  return out;
}

NodePtr neg(const NodePtr& a) { return scale(a, -1.0); }

NodePtr scale(const NodePtr& a, double s) {
  Array v(a->value.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = a->value[i] * s;
  auto out = make_node(std::move(v), "scale", {a});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a, s] {
      a->ensure_grad();
      for (std::size_t i = 0; i < o->grad.numel(); ++i)
        a->grad[i] += o->grad[i] * s;
    };
  }
  return out;
}

NodePtr add_scalar(const NodePtr& a, double s) {
  Array v(a->value.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = a->value[i] + s;
  auto out = make_node(std::move(v), "add_scalar", {a});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a] {
      a->ensure_grad();
      for (std::size_t i = 0; i < o->grad.numel(); ++i)
        a->grad[i] += o->grad[i];
    };
  }
  return out;
}

namespace {

template <class F, class DF>
NodePtr unary(const NodePtr& a, const char* op, F f, DF df) {
  Array v(a->value.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = f(a->value[i]);
  auto out = make_node(std::move(v), op, {a});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a, df] {
      a->ensure_grad();
      for (std::size_t i = 0; i < o->grad.numel(); ++i)
        a->grad[i] += o->grad[i] * df(a->value[i], o->value[i]);
    };
  }
  return out;
}

}  // namespace

NodePtr sigmoid(const NodePtr& a) {
  return unary(
      a, "sigmoid", [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}

NodePtr tanh_(const NodePtr& a) {
  return unary(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

NodePtr exp_(const NodePtr& a) {
  return unary(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

NodePtr log_(const NodePtr& a) {
  return unary(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

NodePtr leaky_relu(const NodePtr& a, double slope) {
  return unary(
      a, "leaky_relu",
      [slope](double x) { return x >= 0.0 ? x : slope * x; },
      [slope](double x, double) { return x >= 0.0 ? 1.0 : slope; });
}

NodePtr square(const NodePtr& a) {
  return unary(
      a, "square", [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

NodePtr reciprocal(const NodePtr& a) {
  return unary(
      a, "reciprocal", [](double x) { return 1.0 / x; },
      [](double, double y) { return -y * y; });
}

NodePtr sum(const NodePtr& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
  auto out = make_node(Array::scalar(s), "sum", {a});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a] {
      a->ensure_grad();
      const double g = o->grad[0];
      for (std::size_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += g;
    };
  }
  return out;
}

NodePtr mean(const NodePtr& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a->value.numel()));
}

NodePtr dot(const NodePtr& a, const NodePtr& b) { return sum(mul(a, b)); }

NodePtr matmul(const NodePtr& a, const NodePtr& b) {
  const Array& A = a->value;
  const Array& B = b->value;
  if (A.rank() != 2 || B.rank() != 2 || A.extent(1) != B.extent(0))
    throw std::invalid_argument("matmul: incompatible shapes " +
                                A.shape_str() + " x " + B.shape_str());
  const std::size_t m = A.extent(0), k = A.extent(1), n = B.extent(1);
  Array v({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t l = 0; l < k; ++l) {
      const double av = A.at2(i, l);
      for (std::size_t j = 0; j < n; ++j) v.at2(i, j) += av * B.at2(l, j);
    }
  auto out = make_node(std::move(v), "matmul", {a, b});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a, b, m, k, n] {
      if (a->needs_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = o->grad.at2(i, j);
            for (std::size_t l = 0; l < k; ++l)
              a->grad.at2(i, l) += g * b->value.at2(l, j);
          }
      }
      if (b->needs_grad) {
        b->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) {
            const double g = o->grad.at2(i, j);
            for (std::size_t l = 0; l < k; ++l)
              b->grad.at2(l, j) += g * a->value.at2(i, l);
          }
      }
    };
  }
  return out;
}

NodePtr softmax(const NodePtr& logits, std::size_t axis) {
  const Array& x = logits->value;
  if (axis >= x.rank()) throw std::invalid_argument("softmax: bad axis");
  const std::size_t n = x.extent(axis);
  if (n == 0) throw std::invalid_argument("softmax: empty axis");
  std::size_t inner = 1, outer = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.extent(i);
  for (std::size_t i = 0; i < axis; ++i) outer *= x.extent(i);

  Array v(x.shape());
  for (std::size_t oi = 0; oi < outer; ++oi)
    for (std::size_t ii = 0; ii < inner; ++ii) {
      const std::size_t base = oi * n * inner + ii;
      double mx = x[base];
      for (std::size_t j = 1; j < n; ++j)
        mx = std::max(mx, x[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        v[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) v[base + j * inner] /= z;
    }
  auto out = make_node(std::move(v), "softmax", {logits});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, logits, n, inner, outer] {
      logits->ensure_grad();
      for (std::size_t oi = 0; oi < outer; ++oi)
        for (std::size_t ii = 0; ii < inner; ++ii) {
          const std::size_t base = oi * n * inner + ii;
          double gy = 0.0;
          for (std::size_t j = 0; j < n; ++j)
            gy += o->grad[base + j * inner] * o->value[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const double y = o->value[base + j * inner];
            logits->grad[base + j * inner] +=
                y * (o->grad[base + j * inner] - gy);
          }
        }
    };
  }
  return out;
}

NodePtr conv2d(const NodePtr& input, const NodePtr& kernel, std::size_t stride,
               std::size_t padding) {
  const Array& in = input->value;
  const Array& ker = kernel->value;
  if (in.rank() != 3 || ker.rank() != 4)
    throw std::invalid_argument("conv2d: expects [C,H,W] and [O,C,k,k]");
  if (in.extent(0) != ker.extent(1))
    throw std::invalid_argument("conv2d: channel mismatch");
  const std::size_t cin = in.extent(0), h = in.extent(1), w = in.extent(2);
  const std::size_t cout = ker.extent(0), k = ker.extent(2);
  if (ker.extent(3) != k || k % 2 == 0)
    throw std::invalid_argument("conv2d: kernel must be square with odd size");
  if (stride == 0) throw std::invalid_argument("conv2d: stride 0");
  if (h + 2 * padding < k || w + 2 * padding < k)
    throw std::invalid_argument("conv2d: input smaller than kernel");
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (w + 2 * padding - k) / stride + 1;

  Array v({cout, oh, ow});
  for (std::size_t oc = 0; oc < cout; ++oc)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ic = 0; ic < cin; ++ic)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) -
                            static_cast<long>(padding);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) -
                              static_cast<long>(padding);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              acc += in.at3(ic, iy, ix) * ker.at4(oc, ic, ky, kx);
            }
          }
        v.at3(oc, oy, ox) = acc;
      }
  auto out = make_node(std::move(v), "conv2d", {input, kernel});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, input, kernel, stride, padding, cin, h, w, cout, k, oh,
                     ow] {
      if (input->needs_grad) input->ensure_grad();
      if (kernel->needs_grad) kernel->ensure_grad();
      for (std::size_t oc = 0; oc < cout; ++oc)
        for (std::size_t oy = 0; oy < oh; ++oy)
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const double g = o->grad.at3(oc, oy, ox);
            if (g == 0.0) continue;
            for (std::size_t ic = 0; ic < cin; ++ic)
              for (std::size_t ky = 0; ky < k; ++ky) {
                const long iy = static_cast<long>(oy * stride + ky) -
                                static_cast<long>(padding);
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const long ix = static_cast<long>(ox * stride + kx) -
                                  static_cast<long>(padding);
                  if (ix < 0 || ix >= static_cast<long>(w)) continue;
                  if (input->needs_grad)
                    input->grad.at3(ic, iy, ix) +=
                        g * kernel->value.at4(oc, ic, ky, kx);
                  if (kernel->needs_grad)
                    kernel->grad.at4(oc, ic, ky, kx) +=
                        g * input->value.at3(ic, iy, ix);
                }
              }
          }
    };
  }
  return out;
}

NodePtr upsample2x(const NodePtr& a) {
  const Array& in = a->value;
  if (in.rank() != 3) throw std::invalid_argument("upsample2x: expects [C,H,W]");
  const std::size_t c = in.extent(0), h = in.extent(1), w = in.extent(2);
  Array v({c, 2 * h, 2 * w});
  for (std::size_t ic = 0; ic < c; ++ic)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t x = 0; x < 2 * w; ++x)
        v.at3(ic, y, x) = in.at3(ic, y / 2, x / 2);
  auto out = make_node(std::move(v), "upsample2x", {a});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a, c, h, w] {
      a->ensure_grad();
      for (std::size_t ic = 0; ic < c; ++ic)
        for (std::size_t y = 0; y < 2 * h; ++y)
          for (std::size_t x = 0; x < 2 * w; ++x)
            a->grad.at3(ic, y / 2, x / 2) += o->grad.at3(ic, y, x);
    };
  }
  return out;
}

NodePtr reshape(const NodePtr& a, std::vector<std::size_t> shape) {
  if (Array::numel_of(shape) != a->value.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Array v(shape);
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = a->value[i];
  auto out = make_node(std::move(v), "reshape", {a});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a] {
      a->ensure_grad();
      for (std::size_t i = 0; i < o->grad.numel(); ++i)
        a->grad[i] += o->grad[i];
    };
  }
  return out;
}

NodePtr scale_node(const NodePtr& a, const NodePtr& s) {
  if (s->value.numel() != 1)
    throw std::invalid_argument("scale_node: scale must be scalar");
  const double sv = s->value[0];
  Array v(a->value.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = a->value[i] * sv;
  auto out = make_node(std::move(v), "scale_node", {a, s});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a, s, sv] {
      if (a->needs_grad) {
        a->ensure_grad();
        for (std::size_t i = 0; i < o->grad.numel(); ++i)
          a->grad[i] += o->grad[i] * sv;
      }
      if (s->needs_grad) {
        s->ensure_grad();
        double acc = 0.0;
        for (std::size_t i = 0; i < o->grad.numel(); ++i)
          acc += o->grad[i] * a->value[i];
        s->grad[0] += acc;
      }
    };
  }
  return out;
}

NodePtr concat(const std::vector<NodePtr>& parts) {
  std::size_t n = 0;
  for (const auto& p : parts) {
    if (p->value.rank() != 1)
      throw std::invalid_argument("concat: 1-D parts only");
    n += p->value.numel();
  }
  Array v({n});
  std::size_t off = 0;
  for (const auto& p : parts)
    for (std::size_t i = 0; i < p->value.numel(); ++i) v[off++] = p->value[i];
  auto out = make_node(std::move(v), "concat", parts);
  if (out->needs_grad) {
    Node* o = out.get();
    auto ps = parts;
    out->backprop = [o, ps] {
      std::size_t off = 0;
      for (const auto& p : ps) {
        if (p->needs_grad) {
          p->ensure_grad();
          for (std::size_t i = 0; i < p->value.numel(); ++i)
            p->grad[i] += o->grad[off + i];
        }
        off += p->value.numel();
      }
    };
  }
  return out;
}

NodePtr slice(const NodePtr& a, std::size_t start, std::size_t len) {
  if (a->value.rank() != 1 || start + len > a->value.numel())
    throw std::invalid_argument("slice: out of range");
  Array v({len});
  for (std::size_t i = 0; i < len; ++i) v[i] = a->value[start + i];
  auto out = make_node(std::move(v), "slice", {a});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a, start, len] {
      a->ensure_grad();
      for (std::size_t i = 0; i < len; ++i) a->grad[start + i] += o->grad[i];
    };
  }
  return out;
}

NodePtr index(const NodePtr& a, std::size_t i) {
  if (i >= a->value.numel()) throw std::invalid_argument("index: out of range");
  auto out = make_node(Array::scalar(a->value[i]), "index", {a});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, a, i] {
      a->ensure_grad();
      a->grad[i] += o->grad[0];
    };
  }
  return out;
}

NodePtr stack_scalars(const std::vector<NodePtr>& scalars) {
  Array v({scalars.size()});
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i]->value.numel() != 1)
      throw std::invalid_argument("stack_scalars: non-scalar part");
    v[i] = scalars[i]->value[0];
  }
  auto out = make_node(std::move(v), "stack", scalars);
  if (out->needs_grad) {
    Node* o = out.get();
    auto ps = scalars;
    out->backprop = [o, ps] {
      for (std::size_t i = 0; i < ps.size(); ++i)
        if (ps[i]->needs_grad) {
          ps[i]->ensure_grad();
          ps[i]->grad[0] += o->grad[i];
        }
    };
  }
  return out;
}

NodePtr linear_gather(const NodePtr& featmap,
                      const std::vector<GatherTap>& taps) {
  const Array& fm = featmap->value;
  if (fm.rank() != 3) throw std::invalid_argument("linear_gather: [C,H,W]");
  const std::size_t c = fm.extent(0);
  Array v({c});
  for (const auto& t : taps) {
    if (t.y >= fm.extent(1) || t.x >= fm.extent(2))
      throw std::invalid_argument("linear_gather: tap out of bounds");
    for (std::size_t ic = 0; ic < c; ++ic) v[ic] += t.w * fm.at3(ic, t.y, t.x);
  }
  auto out = make_node(std::move(v), "gather", {featmap});
  if (out->needs_grad) {
    Node* o = out.get();
    out->backprop = [o, featmap, taps, c] {
      featmap->ensure_grad();
      for (const auto& t : taps)
        for (std::size_t ic = 0; ic < c; ++ic)
          featmap->grad.at3(ic, t.y, t.x) += t.w * o->grad[ic];
    };
  }
  return out;
}

NodePtr weighted_sum(const std::vector<NodePtr>& scalars,
                     const std::vector<double>& weights) {
  if (scalars.size() != weights.size())
    throw std::invalid_argument("weighted_sum: size mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i]->value.numel() != 1)
      throw std::invalid_argument("weighted_sum: non-scalar part");
    s += weights[i] * scalars[i]->value[0];
  }
  auto out = make_node(Array::scalar(s), "weighted_sum", scalars);
  if (out->needs_grad) {
    Node* o = out.get();
    auto ps = scalars;
    out->backprop = [o, ps, weights] {
      for (std::size_t i = 0; i < ps.size(); ++i)
        if (ps[i]->needs_grad) {
          ps[i]->ensure_grad();
          ps[i]->grad[0] += weights[i] * o->grad[0];
        }
    };
  }
  return out;
}

void backward(const NodePtr& root) { backward(root, false); }

void backward(const NodePtr& root, bool release_intermediates) {
  if (root->value.numel() != 1)
    throw std::logic_error("backward: root must be scalar");
  // Iterative post-order toposort. A process-global visit epoch replaces a
  // hash set: graph recording is single-threaded by contract.
  static std::uint64_t epoch = 0;
  const std::uint64_t tag = ++epoch;
  std::vector<Node*> order;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  root->visit_tag = tag;
  while (!stack.empty()) {
    auto& [n, idx] = stack.back();
    if (idx < n->parents.size()) {
      Node* p = n->parents[idx++].get();
      if (p->needs_grad && p->visit_tag != tag) {
        p->visit_tag = tag;
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop();
  if (release_intermediates)
    // Later backward passes through shared subgraphs must not re-propagate
    // this pass's gradient; trainable leaves keep accumulating.
    for (Node* n : order)
      if (!n->requires_grad) n->zero_grad();
}

}  // namespace pmrl::ad
