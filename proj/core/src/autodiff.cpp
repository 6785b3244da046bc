#include "nestseg/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace nestseg::ad {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MMap = Eigen::Map<RowMat>;
using CMap = Eigen::Map<const RowMat>;

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool need = g_grad_enabled;
  if (need) {
    need = false;
    for (const auto& p : parents)
      if (p->requires_grad) { need = true; break; }
  }
  if (need) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backprop = std::move(fn);
  }
  return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                a->value.shape_str() + " vs " + b->value.shape_str());
}

}  // namespace

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

Var constant(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  return n;
}

Var leaf(Tensor v) {
  auto n = std::make_shared<Node>();
  n->value = std::move(v);
  n->requires_grad = true;
  return n;
}

void backward(const Var& root) {
  if (root->value.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  // iterative post-order topo sort over grad-requiring nodes
  std::vector<Node*> order;
  std::unordered_set<Node*> discovered;
  std::vector<std::pair<Node*, size_t>> stack;
  if (root->requires_grad) {
    stack.push_back({root.get(), 0});
    discovered.insert(root.get());
  }
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && discovered.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad.fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad.defined()) n->backprop(*n);
  }
}

// ---------------- elementwise ----------------

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a->value.clone();
  const double* bd = b->value.data();
  double* od = out.data();
  for (int64_t i = 0; i < out.numel(); ++i) od[i] += bd[i];
  return make(std::move(out), {a, b}, [](Node& n) {
    for (int p = 0; p < 2; ++p) {
      if (!n.parents[p]->requires_grad) continue;
      Tensor& g = n.parents[p]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  });
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a->value.clone();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
  return make(std::move(out), {a, b}, [](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a->value.clone();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
  return make(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out = a->value.clone();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] /= b->value[i];
  return make(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = n.parents[0]->value;
    const Tensor& bv = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / bv[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i)
        g[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
    }
  });
}

Var scale(const Var& a, double c) {
  Tensor out = a->value.clone();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= c;
  return make(std::move(out), {a}, [c](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += c * n.grad[i];
  });
}

Var add_scalar(const Var& a, double c) {
  Tensor out = a->value.clone();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += c;
  return make(std::move(out), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

Var gelu(const Var& a) {
  static const double kInvSqrt2 = 0.7071067811865475;
  static const double kInvSqrt2Pi = 0.3989422804014327;
  Tensor out = a->value.clone();
  for (int64_t i = 0; i < out.numel(); ++i) {
    double x = out[i];
    out[i] = 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
  }
  return make(std::move(out), {a}, [](Node& n) {
    const Tensor& x = n.parents[0]->value;
    Tensor& g = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) {
      double xi = x[i];
      double cdf = 0.5 * (1.0 + std::erf(xi * kInvSqrt2));
      double pdf = kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
      g[i] += n.grad[i] * (cdf + xi * pdf);
    }
  });
}

Var sigmoid(const Var& a) {
  Tensor out = a->value.clone();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  return make(std::move(out), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) {
      double y = n.value[i];
      g[i] += n.grad[i] * y * (1.0 - y);
    }
  });
}

// ---------------- linear algebra ----------------

Var matmul(const Var& a, const Var& b) {
  if (a->value.rank() != 2 || b->value.rank() != 2 ||
      a->value.dim(1) != b->value.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " +
                                a->value.shape_str() + " x " + b->value.shape_str());
  int64_t N = a->value.dim(0), K = a->value.dim(1), M = b->value.dim(1);
  Tensor out({N, M});
  MMap(out.data(), N, M).noalias() =
      CMap(a->value.data(), N, K) * CMap(b->value.data(), K, M);
  return make(std::move(out), {a, b}, [N, K, M](Node& n) {
    CMap go(n.grad.data(), N, M);
    if (n.parents[0]->requires_grad) {
      MMap(n.parents[0]->ensure_grad().data(), N, K).noalias() +=
          go * CMap(n.parents[1]->value.data(), K, M).transpose();
    }
    if (n.parents[1]->requires_grad) {
      MMap(n.parents[1]->ensure_grad().data(), K, M).noalias() +=
          CMap(n.parents[0]->value.data(), N, K).transpose() * go;
    }
  });
}

static Var bmm_impl(const Var& a, const Var& b, bool transpose_b) {
  if (a->value.rank() != 3 || b->value.rank() != 3 || a->value.dim(0) != b->value.dim(0))
    throw std::invalid_argument("bmm: bad shapes");
  int64_t B = a->value.dim(0), N = a->value.dim(1), K = a->value.dim(2);
  int64_t M = transpose_b ? b->value.dim(1) : b->value.dim(2);
  int64_t bk = transpose_b ? b->value.dim(2) : b->value.dim(1);
  if (bk != K) throw std::invalid_argument("bmm: inner dim mismatch");
  Tensor out({B, N, M});
  for (int64_t i = 0; i < B; ++i) {
    CMap am(a->value.data() + i * N * K, N, K);
    MMap om(out.data() + i * N * M, N, M);
    if (transpose_b)
      om.noalias() = am * CMap(b->value.data() + i * M * K, M, K).transpose();
    else
      om.noalias() = am * CMap(b->value.data() + i * K * M, K, M);
  }
  return make(std::move(out), {a, b}, [B, N, K, M, transpose_b](Node& n) {
    for (int64_t i = 0; i < B; ++i) {
      CMap go(n.grad.data() + i * N * M, N, M);
      const double* av = n.parents[0]->value.data() + i * N * K;
      const double* bv = n.parents[1]->value.data() + i * (transpose_b ? M * K : K * M);
      if (n.parents[0]->requires_grad) {
        MMap ga(n.parents[0]->ensure_grad().data() + i * N * K, N, K);
        if (transpose_b)
          ga.noalias() += go * CMap(bv, M, K);
        else
          ga.noalias() += go * CMap(bv, K, M).transpose();
      }
      if (n.parents[1]->requires_grad) {
        if (transpose_b) {
          MMap gb(n.parents[1]->ensure_grad().data() + i * M * K, M, K);
          gb.noalias() += go.transpose() * CMap(av, N, K);
        } else {
          MMap gb(n.parents[1]->ensure_grad().data() + i * K * M, K, M);
          gb.noalias() += CMap(av, N, K).transpose() * go;
        }
      }
    }
  });
}

Var bmm(const Var& a, const Var& b) { return bmm_impl(a, b, false); }
Var bmm_nt(const Var& a, const Var& b) { return bmm_impl(a, b, true); }

Var add_rowbias(const Var& x, const Var& b) {
  if (b->value.rank() != 1) throw std::invalid_argument("add_rowbias: bias must be 1-D");
  int64_t C = b->value.dim(0);
  if (x->value.numel() % C != 0)
    throw std::invalid_argument("add_rowbias: size not divisible by bias length");
  int64_t N = x->value.numel() / C;
  Tensor out = x->value.clone();
  for (int64_t r = 0; r < N; ++r)
    for (int64_t c = 0; c < C; ++c) out[r * C + c] += b->value[c];
  return make(std::move(out), {x, b}, [N, C](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (int64_t r = 0; r < N; ++r)
        for (int64_t c = 0; c < C; ++c) g[c] += n.grad[r * C + c];
    }
  });
}

// ---------------- shape ----------------

Var reshape(const Var& a, std::vector<int64_t> shape) {
  Tensor out = a->value.reshaped(std::move(shape));
  return make(std::move(out), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
  });
}

static std::vector<int64_t> strides_of(const std::vector<int64_t>& shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    s[i] = s[i + 1] * shape[i + 1];
  return s;
}

Var permute(const Var& a, const std::vector<int>& perm) {
  const auto& ish = a->value.shape();
  if (perm.size() != ish.size()) throw std::invalid_argument("permute: rank mismatch");
  std::vector<int64_t> osh(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) osh[i] = ish[perm[i]];
  auto istr = strides_of(ish);
  auto ostr = strides_of(osh);
  // per output index, the input stride that moves along that output axis
  std::vector<int64_t> map_str(perm.size());
  for (size_t i = 0; i < perm.size(); ++i) map_str[i] = istr[perm[i]];
  int64_t n = a->value.numel();
  Tensor out(osh);
  const double* src = a->value.data();
  double* dst = out.data();
  std::vector<int64_t> idx(perm.size(), 0);
  int rank = static_cast<int>(perm.size());
  int64_t src_off = 0;
  for (int64_t o = 0; o < n; ++o) {
    dst[o] = src[src_off];
    for (int d = rank - 1; d >= 0; --d) {
      if (++idx[d] < osh[d]) { src_off += map_str[d]; break; }
      idx[d] = 0;
      src_off -= map_str[d] * (osh[d] - 1);
    }
  }
  return make(std::move(out), {a},
              [osh, map_str, rank, n](Node& nd) {
                Tensor& g = nd.parents[0]->ensure_grad();
                double* gp = g.data();
                const double* gout = nd.grad.data();
                std::vector<int64_t> idx(rank, 0);
                int64_t src_off = 0;
                for (int64_t o = 0; o < n; ++o) {
                  gp[src_off] += gout[o];
                  for (int d = rank - 1; d >= 0; --d) {
                    if (++idx[d] < osh[d]) { src_off += map_str[d]; break; }
                    idx[d] = 0;
                    src_off -= map_str[d] * (osh[d] - 1);
                  }
                }
              });
}

Var gather_rows(const Var& x, std::shared_ptr<const std::vector<int64_t>> index) {
  if (x->value.rank() != 2) throw std::invalid_argument("gather_rows: need 2-D input");
  int64_t C = x->value.dim(1);
  int64_t R = static_cast<int64_t>(index->size());
  Tensor out({R, C});
  const double* src = x->value.data();
  for (int64_t r = 0; r < R; ++r) {
    int64_t s = (*index)[r];
    std::copy(src + s * C, src + (s + 1) * C, out.data() + r * C);
  }
  return make(std::move(out), {x}, [index, R, C](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    const double* go = n.grad.data();
    for (int64_t r = 0; r < R; ++r) {
      int64_t s = (*index)[r];
      double* gp = g.data() + s * C;
      const double* gr = go + r * C;
      for (int64_t c = 0; c < C; ++c) gp[c] += gr[c];
    }
  });
}

Var concat0(const Var& a, const Var& b) {
  const auto& as = a->value.shape();
  const auto& bs = b->value.shape();
  if (as.size() != bs.size() || as.empty())
    throw std::invalid_argument("concat0: rank mismatch");
  for (size_t i = 1; i < as.size(); ++i)
    if (as[i] != bs[i]) throw std::invalid_argument("concat0: trailing dims differ");
  std::vector<int64_t> osh = as;
  osh[0] += bs[0];
  Tensor out(osh);
  int64_t na = a->value.numel(), nb = b->value.numel();
  std::copy(a->value.data(), a->value.data() + na, out.data());
  std::copy(b->value.data(), b->value.data() + nb, out.data() + na);
  return make(std::move(out), {a, b}, [na, nb](Node& n) {
    if (n.parents[0]->requires_grad) {
      Tensor& g = n.parents[0]->ensure_grad();
      for (int64_t i = 0; i < na; ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      Tensor& g = n.parents[1]->ensure_grad();
      for (int64_t i = 0; i < nb; ++i) g[i] += n.grad[na + i];
    }
  });
}

// ---------------- normalization / attention ----------------

Var softmax_lastdim(const Var& a) {
  int64_t C = a->value.dim(a->value.rank() - 1);
  int64_t N = a->value.numel() / C;
  Tensor out = a->value.clone();
  for (int64_t r = 0; r < N; ++r) {
    double* row = out.data() + r * C;
    double mx = row[0];
    for (int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
    double s = 0;
    for (int64_t c = 0; c < C; ++c) { row[c] = std::exp(row[c] - mx); s += row[c]; }
    for (int64_t c = 0; c < C; ++c) row[c] /= s;
  }
  return make(std::move(out), {a}, [N, C](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (int64_t r = 0; r < N; ++r) {
      const double* y = n.value.data() + r * C;
      const double* go = n.grad.data() + r * C;
      double dot = 0;
      for (int64_t c = 0; c < C; ++c) dot += go[c] * y[c];
      double* gp = g.data() + r * C;
      for (int64_t c = 0; c < C; ++c) gp[c] += (go[c] - dot) * y[c];
    }
  });
}

Var layernorm_lastdim(const Var& x, const Var& gamma, const Var& beta, double eps) {
  int64_t C = x->value.dim(x->value.rank() - 1);
  if (gamma->value.numel() != C || beta->value.numel() != C)
    throw std::invalid_argument("layernorm: affine parameter size mismatch");
  int64_t N = x->value.numel() / C;
  Tensor out(x->value.shape());
  auto mean = std::make_shared<std::vector<double>>(N);
  auto rstd = std::make_shared<std::vector<double>>(N);
  for (int64_t r = 0; r < N; ++r) {
    const double* row = x->value.data() + r * C;
    double m = 0;
    for (int64_t c = 0; c < C; ++c) m += row[c];
    m /= C;
    double v = 0;
    for (int64_t c = 0; c < C; ++c) { double d = row[c] - m; v += d * d; }
    v /= C;
    double rs = 1.0 / std::sqrt(v + eps);
    (*mean)[r] = m;
    (*rstd)[r] = rs;
    double* orow = out.data() + r * C;
    for (int64_t c = 0; c < C; ++c)
      orow[c] = (row[c] - m) * rs * gamma->value[c] + beta->value[c];
  }
  return make(std::move(out), {x, gamma, beta}, [N, C, mean, rstd](Node& n) {
    const Tensor& xv = n.parents[0]->value;
    const Tensor& gv = n.parents[1]->value;
    bool need_x = n.parents[0]->requires_grad;
    bool need_g = n.parents[1]->requires_grad;
    bool need_b = n.parents[2]->requires_grad;
    std::vector<double> xhat(C), gh(C);
    for (int64_t r = 0; r < N; ++r) {
      const double* xr = xv.data() + r * C;
      const double* go = n.grad.data() + r * C;
      double m = (*mean)[r], rs = (*rstd)[r];
      double mg = 0, mgx = 0;
      for (int64_t c = 0; c < C; ++c) {
        xhat[c] = (xr[c] - m) * rs;
        gh[c] = go[c] * gv[c];
        mg += gh[c];
        mgx += gh[c] * xhat[c];
      }
      mg /= C;
      mgx /= C;
      if (need_x) {
        double* gx = n.parents[0]->ensure_grad().data() + r * C;
        for (int64_t c = 0; c < C; ++c)
          gx[c] += rs * (gh[c] - mg - xhat[c] * mgx);
      }
      if (need_g) {
        Tensor& gg = n.parents[1]->ensure_grad();
        for (int64_t c = 0; c < C; ++c) gg[c] += go[c] * xhat[c];
      }
      if (need_b) {
        Tensor& gb = n.parents[2]->ensure_grad();
        for (int64_t c = 0; c < C; ++c) gb[c] += go[c];
      }
    }
  });
}

// ---------------- spatial ----------------

namespace {

struct ConvDims {
  int64_t Cin, X, Y, Z, Cout, k, OX, OY, OZ, K, V;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int pad) {
  if (x.rank() != 4 || w.rank() != 5) throw std::invalid_argument("conv3d: bad ranks");
  ConvDims d;
  d.Cin = x.dim(0); d.X = x.dim(1); d.Y = x.dim(2); d.Z = x.dim(3);
  d.Cout = w.dim(0); d.k = w.dim(2);
  if (w.dim(1) != d.Cin || w.dim(3) != d.k || w.dim(4) != d.k)
    throw std::invalid_argument("conv3d: weight shape mismatch");
  d.OX = d.X + 2 * pad - d.k + 1;
  d.OY = d.Y + 2 * pad - d.k + 1;
  d.OZ = d.Z + 2 * pad - d.k + 1;
  if (d.OX < 1 || d.OY < 1 || d.OZ < 1)
    throw std::invalid_argument("conv3d: output would be empty");
  d.K = d.Cin * d.k * d.k * d.k;
  d.V = d.OX * d.OY * d.OZ;
  return d;
}

// fill im2col rows for output voxels [v0, v0+len)
void im2col(const Tensor& x, const ConvDims& d, int pad, int64_t v0, int64_t len,
            double* col) {
  const double* xd = x.data();
  for (int64_t r = 0; r < len; ++r) {
    int64_t v = v0 + r;
    int64_t oz = v % d.OZ, oy = (v / d.OZ) % d.OY, ox = v / (d.OZ * d.OY);
    double* crow = col + r * d.K;
    int64_t j = 0;
    for (int64_t ci = 0; ci < d.Cin; ++ci) {
      const double* xc = xd + ci * d.X * d.Y * d.Z;
      for (int64_t kx = 0; kx < d.k; ++kx) {
        int64_t ix = ox - pad + kx;
        for (int64_t ky = 0; ky < d.k; ++ky) {
          int64_t iy = oy - pad + ky;
          bool inplane = ix >= 0 && ix < d.X && iy >= 0 && iy < d.Y;
          const double* line = inplane ? xc + (ix * d.Y + iy) * d.Z : nullptr;
          for (int64_t kz = 0; kz < d.k; ++kz, ++j) {
            int64_t iz = oz - pad + kz;
            crow[j] = (inplane && iz >= 0 && iz < d.Z) ? line[iz] : 0.0;
          }
        }
      }
    }
  }
}

int64_t conv_chunk(const ConvDims& d) {
  int64_t len = (4 << 20) / std::max<int64_t>(1, d.K);  // ~32 MB of doubles
  return std::clamp<int64_t>(len, 64, d.V);
}

}  // namespace

Var conv3d(const Var& x, const Var& w, const Var& b, int pad) {
  ConvDims d = conv_dims(x->value, w->value, pad);
  if (b->value.numel() != d.Cout) throw std::invalid_argument("conv3d: bias size");
  Tensor out({d.Cout, d.OX, d.OY, d.OZ});
  int64_t chunk = conv_chunk(d);
  Tensor::Buffer col(chunk * d.K);
  CMap wm(w->value.data(), d.Cout, d.K);
  MMap om(out.data(), d.Cout, d.V);
  for (int64_t v0 = 0; v0 < d.V; v0 += chunk) {
    int64_t len = std::min(chunk, d.V - v0);
    im2col(x->value, d, pad, v0, len, col.data());
    om.block(0, v0, d.Cout, len).noalias() =
        wm * CMap(col.data(), len, d.K).transpose();
  }
  for (int64_t co = 0; co < d.Cout; ++co) {
    double bias = b->value[co];
    double* row = out.data() + co * d.V;
    for (int64_t v = 0; v < d.V; ++v) row[v] += bias;
  }
  return make(std::move(out), {x, w, b}, [d, pad](Node& n) {
    const Tensor& xv = n.parents[0]->value;
    const Tensor& wv = n.parents[1]->value;
    bool need_x = n.parents[0]->requires_grad;
    bool need_w = n.parents[1]->requires_grad;
    bool need_b = n.parents[2]->requires_grad;
    CMap go(n.grad.data(), d.Cout, d.V);
    CMap wm(wv.data(), d.Cout, d.K);
    if (need_b) {
      Tensor& gb = n.parents[2]->ensure_grad();
      for (int64_t co = 0; co < d.Cout; ++co) gb[co] += go.row(co).sum();
    }
    int64_t chunk = conv_chunk(d);
    Tensor::Buffer col(chunk * d.K), gcol(need_x ? chunk * d.K : 0);
    double* gxd = nullptr;
    if (need_x) gxd = n.parents[0]->ensure_grad().data();
    Tensor* gw = nullptr;
    if (need_w) gw = &n.parents[1]->ensure_grad();
    for (int64_t v0 = 0; v0 < d.V; v0 += chunk) {
      int64_t len = std::min(chunk, d.V - v0);
      if (need_w) {
        im2col(xv, d, pad, v0, len, col.data());
        MMap(gw->data(), d.Cout, d.K).noalias() +=
            go.block(0, v0, d.Cout, len) * CMap(col.data(), len, d.K);
      }
      if (need_x) {
        MMap(gcol.data(), len, d.K).noalias() =
            go.block(0, v0, d.Cout, len).transpose() * wm;
        // col2im scatter-add
        for (int64_t r = 0; r < len; ++r) {
          int64_t v = v0 + r;
          int64_t oz = v % d.OZ, oy = (v / d.OZ) % d.OY, ox = v / (d.OZ * d.OY);
          const double* crow = gcol.data() + r * d.K;
          int64_t j = 0;
          for (int64_t ci = 0; ci < d.Cin; ++ci) {
            double* gc = gxd + ci * d.X * d.Y * d.Z;
            for (int64_t kx = 0; kx < d.k; ++kx) {
              int64_t ix = ox - pad + kx;
              for (int64_t ky = 0; ky < d.k; ++ky) {
                int64_t iy = oy - pad + ky;
                bool inplane = ix >= 0 && ix < d.X && iy >= 0 && iy < d.Y;
                double* line = inplane ? gc + (ix * d.Y + iy) * d.Z : nullptr;
                for (int64_t kz = 0; kz < d.k; ++kz, ++j) {
                  int64_t iz = oz - pad + kz;
                  if (inplane && iz >= 0 && iz < d.Z) line[iz] += crow[j];
                }
              }
            }
          }
        }
      }
    }
  });
}

Var conv1x1(const Var& x, const Var& w, const Var& b) {
  if (x->value.rank() < 2 || w->value.rank() != 2)
    throw std::invalid_argument("conv1x1: bad ranks");
  int64_t Cin = x->value.dim(0);
  int64_t V = x->value.numel() / Cin;
  int64_t Cout = w->value.dim(0);
  if (w->value.dim(1) != Cin) throw std::invalid_argument("conv1x1: channel mismatch");
  if (b->value.numel() != Cout) throw std::invalid_argument("conv1x1: bias size");
  std::vector<int64_t> osh = x->value.shape();
  osh[0] = Cout;
  Tensor out(osh);
  MMap om(out.data(), Cout, V);
  om.noalias() = CMap(w->value.data(), Cout, Cin) * CMap(x->value.data(), Cin, V);
  for (int64_t co = 0; co < Cout; ++co) om.row(co).array() += b->value[co];
  return make(std::move(out), {x, w, b}, [Cin, Cout, V](Node& n) {
    CMap go(n.grad.data(), Cout, V);
    if (n.parents[0]->requires_grad) {
      MMap(n.parents[0]->ensure_grad().data(), Cin, V).noalias() +=
          CMap(n.parents[1]->value.data(), Cout, Cin).transpose() * go;
    }
    if (n.parents[1]->requires_grad) {
      MMap(n.parents[1]->ensure_grad().data(), Cout, Cin).noalias() +=
          go * CMap(n.parents[0]->value.data(), Cin, V).transpose();
    }
    if (n.parents[2]->requires_grad) {
      Tensor& gb = n.parents[2]->ensure_grad();
      for (int64_t co = 0; co < Cout; ++co) gb[co] += go.row(co).sum();
    }
  });
}

Var maxpool2(const Var& x) {
  if (x->value.rank() != 4) throw std::invalid_argument("maxpool2: need [C,X,Y,Z]");
  int64_t C = x->value.dim(0), X = x->value.dim(1), Y = x->value.dim(2), Z = x->value.dim(3);
  if (X % 2 || Y % 2 || Z % 2) throw std::invalid_argument("maxpool2: odd extent");
  int64_t OX = X / 2, OY = Y / 2, OZ = Z / 2;
  Tensor out({C, OX, OY, OZ});
  auto arg = std::make_shared<std::vector<int64_t>>(out.numel());
  const double* xd = x->value.data();
  int64_t o = 0;
  for (int64_t c = 0; c < C; ++c) {
    const double* xc = xd + c * X * Y * Z;
    for (int64_t i = 0; i < OX; ++i)
      for (int64_t j = 0; j < OY; ++j)
        for (int64_t l = 0; l < OZ; ++l, ++o) {
          double best = -1e300;
          int64_t bi = -1;
          for (int64_t di = 0; di < 2; ++di)
            for (int64_t dj = 0; dj < 2; ++dj)
              for (int64_t dl = 0; dl < 2; ++dl) {
                int64_t off = ((2 * i + di) * Y + (2 * j + dj)) * Z + (2 * l + dl);
                if (xc[off] > best) { best = xc[off]; bi = c * X * Y * Z + off; }
              }
          out[o] = best;
          (*arg)[o] = bi;
        }
  }
  return make(std::move(out), {x}, [arg](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) g[(*arg)[i]] += n.grad[i];
  });
}

Var upsample_nearest2(const Var& x) {
  if (x->value.rank() != 4) throw std::invalid_argument("upsample: need [C,X,Y,Z]");
  int64_t C = x->value.dim(0), X = x->value.dim(1), Y = x->value.dim(2), Z = x->value.dim(3);
  Tensor out({C, 2 * X, 2 * Y, 2 * Z});
  const double* xd = x->value.data();
  double* od = out.data();
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < 2 * X; ++i)
      for (int64_t j = 0; j < 2 * Y; ++j) {
        const double* line = xd + ((c * X + i / 2) * Y + j / 2) * Z;
        double* oline = od + ((c * 2 * X + i) * 2 * Y + j) * 2 * Z;
        for (int64_t l = 0; l < Z; ++l) {
          oline[2 * l] = line[l];
          oline[2 * l + 1] = line[l];
        }
      }
  return make(std::move(out), {x}, [C, X, Y, Z](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    const double* go = n.grad.data();
    for (int64_t c = 0; c < C; ++c)
      for (int64_t i = 0; i < 2 * X; ++i)
        for (int64_t j = 0; j < 2 * Y; ++j) {
          double* gline = g.data() + ((c * X + i / 2) * Y + j / 2) * Z;
          const double* oline = go + ((c * 2 * X + i) * 2 * Y + j) * 2 * Z;
          for (int64_t l = 0; l < Z; ++l)
            gline[l] += oline[2 * l] + oline[2 * l + 1];
        }
  });
}

// ---------------- reductions ----------------

Var sum_all(const Var& a) {
  double s = 0;
  for (int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
  return make(Tensor::scalar(s), {a}, [](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    double gs = n.grad[0];
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += gs;
  });
}

Var mean_all(const Var& a) {
  int64_t n = a->value.numel();
  return scale(sum_all(a), 1.0 / static_cast<double>(n));
}

Var sum_lastdim(const Var& a) {
  int64_t N = a->value.dim(a->value.rank() - 1);
  int64_t C = a->value.numel() / N;
  Tensor out({C});
  for (int64_t c = 0; c < C; ++c) {
    double s = 0;
    const double* row = a->value.data() + c * N;
    for (int64_t i = 0; i < N; ++i) s += row[i];
    out[c] = s;
  }
  return make(std::move(out), {a}, [N, C](Node& n) {
    Tensor& g = n.parents[0]->ensure_grad();
    for (int64_t c = 0; c < C; ++c) {
      double gs = n.grad[c];
      double* row = g.data() + c * N;
      for (int64_t i = 0; i < N; ++i) row[i] += gs;
    }
  });
}

Var bce_mean(const Var& probs, const Tensor& target, double eps) {
  if (probs->value.numel() != target.numel())
    throw std::invalid_argument("bce_mean: shape mismatch");
  int64_t n = probs->value.numel();
  double s = 0;
  for (int64_t i = 0; i < n; ++i) {
    double p = std::clamp(probs->value[i], eps, 1.0 - eps);
    double t = target[i];
    s += -(t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  }
  Tensor tgt = target;  // shared buffer, cheap
  return make(Tensor::scalar(s / n), {probs}, [tgt, eps, n](Node& nd) {
    Tensor& g = nd.parents[0]->ensure_grad();
    double gs = nd.grad[0] / n;
    for (int64_t i = 0; i < n; ++i) {
      double praw = nd.parents[0]->value[i];
      if (praw <= eps || praw >= 1.0 - eps) continue;  // clamp region: zero grad
      double t = tgt[i];
      g[i] += gs * (-(t / praw) + (1.0 - t) / (1.0 - praw));
    }
  });
}

}  // namespace nestseg::ad
