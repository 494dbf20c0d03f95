#include "i2b/tape.hpp"

#include <algorithm>
#include <cmath>

namespace i2b {
namespace {

// Compensated (Kahan) summation.
double ksum(const double* v, std::size_t n) {
  double s = 0.0, c = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double y = v[i] - c;
    const double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  return s;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Stable softmax of row[0..n) into out[0..n). Returns nothing; out may alias
// nothing. Used by every probability-producing kernel so sampling and
// training see identical floats.
void softmax_row(const double* row, double* out, std::size_t n) {
  double m = row[0];
  for (std::size_t j = 1; j < n; ++j) m = std::max(m, row[j]);
  double s = 0.0, c = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(row[j] - m);
    const double y = out[j] - c;
    const double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  const double inv = 1.0 / s;
  for (std::size_t j = 0; j < n; ++j) out[j] *= inv;
}

}  // namespace

Tape::Ref Tape::push(std::size_t rows, std::size_t cols) {
  Node n;
  n.rows = rows;
  n.cols = cols;
  n.val.assign(rows * cols, 0.0);
  nodes_.push_back(std::move(n));
  return static_cast<Ref>(nodes_.size() - 1);
}

std::vector<double>& Tape::grad_of(Ref r) {
  Node& n = nodes_[r];
  if (n.grad.size() != n.val.size()) n.grad.assign(n.val.size(), 0.0);
  return n.grad;
}

double Tape::scalar(Ref r) const {
  const Node& n = nodes_[r];
  if (n.val.size() != 1) throw contract_error("scalar() on non-1x1 node");
  return n.val[0];
}

Tape::Ref Tape::leaf(Tensor& t) {
  const Ref r = push(t.rows(), t.cols());
  nodes_[r].val = t.data;
  if (grad_enabled_) {
    nodes_[r].bound = &t;
    nodes_[r].back = [r](Tape& tp) {
      Node& n = tp.nodes_[r];
      n.bound->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) n.bound->grad[i] += n.grad[i];
    };
  }
  return r;
}

Tape::Ref Tape::constant(std::size_t rows, std::size_t cols, std::vector<double> data) {
  if (data.size() != rows * cols) throw shape_error("constant: data/shape mismatch");
  const Ref r = push(rows, cols);
  nodes_[r].val = std::move(data);
  return r;
}

Tape::Ref Tape::constant_row(const std::vector<double>& v) {
  return constant(1, v.size(), v);
}

Tape::Ref Tape::add(Ref a, Ref b) {
  const Node& na = nodes_[a];
  const Node& nb = nodes_[b];
  if (na.rows != nb.rows || na.cols != nb.cols) throw shape_error("add: shape mismatch");
  const Ref r = push(na.rows, na.cols);
  for (std::size_t i = 0; i < nodes_[r].val.size(); ++i)
    nodes_[r].val[i] = nodes_[a].val[i] + nodes_[b].val[i];
  if (grad_enabled_)
    nodes_[r].back = [r, a, b](Tape& tp) {
      const auto& g = tp.nodes_[r].grad;
      auto& ga = tp.grad_of(a);
      auto& gb = tp.grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
    };
  return r;
}

Tape::Ref Tape::sub(Ref a, Ref b) {
  const Node& na = nodes_[a];
  const Node& nb = nodes_[b];
  if (na.rows != nb.rows || na.cols != nb.cols) throw shape_error("sub: shape mismatch");
  const Ref r = push(na.rows, na.cols);
  for (std::size_t i = 0; i < nodes_[r].val.size(); ++i)
    nodes_[r].val[i] = nodes_[a].val[i] - nodes_[b].val[i];
  if (grad_enabled_)
    nodes_[r].back = [r, a, b](Tape& tp) {
      const auto& g = tp.nodes_[r].grad;
      auto& ga = tp.grad_of(a);
      auto& gb = tp.grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i];
        gb[i] -= g[i];
      }
    };
  return r;
}

Tape::Ref Tape::mul(Ref a, Ref b) {
  const Node& na = nodes_[a];
  const Node& nb = nodes_[b];
  if (na.rows != nb.rows || na.cols != nb.cols) throw shape_error("mul: shape mismatch");
  const Ref r = push(na.rows, na.cols);
  for (std::size_t i = 0; i < nodes_[r].val.size(); ++i)
    nodes_[r].val[i] = nodes_[a].val[i] * nodes_[b].val[i];
  if (grad_enabled_)
    nodes_[r].back = [r, a, b](Tape& tp) {
      const auto& g = tp.nodes_[r].grad;
      const auto& va = tp.nodes_[a].val;
      const auto& vb = tp.nodes_[b].val;
      auto& ga = tp.grad_of(a);
      auto& gb = tp.grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] += g[i] * vb[i];
        gb[i] += g[i] * va[i];
      }
    };
  return r;
}

Tape::Ref Tape::min_elem(Ref a, Ref b) {
  const Node& na = nodes_[a];
  const Node& nb = nodes_[b];
  if (na.rows != nb.rows || na.cols != nb.cols) throw shape_error("min_elem: shape mismatch");
  const Ref r = push(na.rows, na.cols);
  for (std::size_t i = 0; i < nodes_[r].val.size(); ++i)
    nodes_[r].val[i] = std::min(nodes_[a].val[i], nodes_[b].val[i]);
  if (grad_enabled_)
    nodes_[r].back = [r, a, b](Tape& tp) {
      const auto& g = tp.nodes_[r].grad;
      const auto& va = tp.nodes_[a].val;
      const auto& vb = tp.nodes_[b].val;
      auto& ga = tp.grad_of(a);
      auto& gb = tp.grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (va[i] <= vb[i])
          ga[i] += g[i];
        else
          gb[i] += g[i];
      }
    };
  return r;
}

Tape::Ref Tape::scale(Ref a, double c) {
  const Node& na = nodes_[a];
  const Ref r = push(na.rows, na.cols);
  for (std::size_t i = 0; i < nodes_[r].val.size(); ++i)
    nodes_[r].val[i] = nodes_[a].val[i] * c;
  if (grad_enabled_)
    nodes_[r].back = [r, a, c](Tape& tp) {
      const auto& g = tp.nodes_[r].grad;
      auto& ga = tp.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    };
  return r;
}

Tape::Ref Tape::add_scalar(Ref a, double c) {
  const Node& na = nodes_[a];
  const Ref r = push(na.rows, na.cols);
  for (std::size_t i = 0; i < nodes_[r].val.size(); ++i)
    nodes_[r].val[i] = nodes_[a].val[i] + c;
  if (grad_enabled_)
    nodes_[r].back = [r, a](Tape& tp) {
      const auto& g = tp.nodes_[r].grad;
      auto& ga = tp.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    };
  return r;
}

Tape::Ref Tape::exp_elem(Ref a) {
  const Node& na = nodes_[a];
  const Ref r = push(na.rows, na.cols);
  for (std::size_t i = 0; i < nodes_[r].val.size(); ++i)
    nodes_[r].val[i] = std::exp(nodes_[a].val[i]);
  if (grad_enabled_)
    nodes_[r].back = [r, a](Tape& tp) {
      const auto& g = tp.nodes_[r].grad;
      const auto& vr = tp.nodes_[r].val;
      auto& ga = tp.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vr[i];
    };
  return r;
}

Tape::Ref Tape::log_elem(Ref a) {
  const Node& na = nodes_[a];
  const Ref r = push(na.rows, na.cols);
  for (std::size_t i = 0; i < nodes_[r].val.size(); ++i)
    nodes_[r].val[i] = std::log(nodes_[a].val[i]);
  if (grad_enabled_)
    nodes_[r].back = [r, a](Tape& tp) {
      const auto& g = tp.nodes_[r].grad;
      const auto& va = tp.nodes_[a].val;
      auto& ga = tp.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / va[i];
    };
  return r;
}

Tape::Ref Tape::clamp(Ref a, double lo, double hi) {
  const Node& na = nodes_[a];
  const Ref r = push(na.rows, na.cols);
  for (std::size_t i = 0; i < nodes_[r].val.size(); ++i)
    nodes_[r].val[i] = std::min(std::max(nodes_[a].val[i], lo), hi);
  if (grad_enabled_)
    nodes_[r].back = [r, a, lo, hi](Tape& tp) {
      const auto& g = tp.nodes_[r].grad;
      const auto& va = tp.nodes_[a].val;
      auto& ga = tp.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i)
        if (va[i] > lo && va[i] < hi) ga[i] += g[i];
    };
  return r;
}

Tape::Ref Tape::silu(Ref a) {
  const Node& na = nodes_[a];
  const Ref r = push(na.rows, na.cols);
  for (std::size_t i = 0; i < nodes_[r].val.size(); ++i) {
    const double x = nodes_[a].val[i];
    nodes_[r].val[i] = x * sigmoid(x);
  }
  if (grad_enabled_)
    nodes_[r].back = [r, a](Tape& tp) {
      const auto& g = tp.nodes_[r].grad;
      const auto& va = tp.nodes_[a].val;
      auto& ga = tp.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double s = sigmoid(va[i]);
        ga[i] += g[i] * s * (1.0 + va[i] * (1.0 - s));
      }
    };
  return r;
}

Tape::Ref Tape::matmul(Ref a, Ref b, bool transpose_a, bool transpose_b) {
  const Node& na = nodes_[a];
  const Node& nb = nodes_[b];
  const std::size_t m = transpose_a ? na.cols : na.rows;
  const std::size_t ka = transpose_a ? na.rows : na.cols;
  const std::size_t kb = transpose_b ? nb.cols : nb.rows;
  const std::size_t n = transpose_b ? nb.rows : nb.cols;
  if (ka != kb) throw shape_error("matmul: inner dimensions disagree");
  const std::size_t kk = ka;
  const Ref r = push(m, n);

  // Element access honoring the transpose flags.
  auto at = [](const Node& nd, bool tr, std::size_t i, std::size_t j) {
    return tr ? nd.val[j * nd.cols + i] : nd.val[i * nd.cols + j];
  };
  auto& out = nodes_[r].val;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = 0; k < kk; ++k) {
      const double aik = at(nodes_[a], transpose_a, i, k);
      if (aik == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j)
        out[i * n + j] += aik * at(nodes_[b], transpose_b, k, j);
    }

  if (grad_enabled_)
    nodes_[r].back = [r, a, b, transpose_a, transpose_b, m, n, kk](Tape& tp) {
      const auto& g = tp.nodes_[r].grad;
      const Node& na2 = tp.nodes_[a];
      const Node& nb2 = tp.nodes_[b];
      auto& ga = tp.grad_of(a);
      auto& gb = tp.grad_of(b);
      auto vala = [&na2, transpose_a](std::size_t i, std::size_t k) {
        return transpose_a ? na2.val[k * na2.cols + i] : na2.val[i * na2.cols + k];
      };
      auto valb = [&nb2, transpose_b](std::size_t k, std::size_t j) {
        return transpose_b ? nb2.val[j * nb2.cols + k] : nb2.val[k * nb2.cols + j];
      };
      auto addga = [&ga, &na2, transpose_a](std::size_t i, std::size_t k, double v) {
        if (transpose_a)
          ga[k * na2.cols + i] += v;
        else
          ga[i * na2.cols + k] += v;
      };
      auto addgb = [&gb, &nb2, transpose_b](std::size_t k, std::size_t j, double v) {
        if (transpose_b)
          gb[j * nb2.cols + k] += v;
        else
          gb[k * nb2.cols + j] += v;
      };
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double gij = g[i * n + j];
          if (gij == 0.0) continue;
          for (std::size_t k = 0; k < kk; ++k) {
            addga(i, k, gij * valb(k, j));
            addgb(k, j, gij * vala(i, k));
          }
        }
    };
  return r;
}

Tape::Ref Tape::add_rowvec(Ref a, Ref row) {
  const std::size_t R = nodes_[a].rows, C = nodes_[a].cols;
  if (nodes_[row].rows != 1 || nodes_[row].cols != C)
    throw shape_error("add_rowvec: row must be 1 x cols(a)");
  const Ref r = push(R, C);
  auto& out = nodes_[r].val;
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < C; ++j)
      out[i * C + j] = nodes_[a].val[i * C + j] + nodes_[row].val[j];
  if (grad_enabled_)
    nodes_[r].back = [r, a, row](Tape& tp) {
      const Node& nd = tp.nodes_[r];
      const auto& g = nd.grad;
      auto& ga = tp.grad_of(a);
      auto& gr = tp.grad_of(row);
      for (std::size_t i = 0; i < nd.rows; ++i)
        for (std::size_t j = 0; j < nd.cols; ++j) {
          ga[i * nd.cols + j] += g[i * nd.cols + j];
          gr[j] += g[i * nd.cols + j];
        }
    };
  return r;
}

Tape::Ref Tape::concat_rows(Ref a, Ref b) {
  const Node& na = nodes_[a];
  const Node& nb = nodes_[b];
  if (na.cols != nb.cols) throw shape_error("concat_rows: column mismatch");
  const Ref r = push(na.rows + nb.rows, na.cols);
  auto& out = nodes_[r].val;
  std::copy(nodes_[a].val.begin(), nodes_[a].val.end(), out.begin());
  std::copy(nodes_[b].val.begin(), nodes_[b].val.end(), out.begin() + nodes_[a].val.size());
  if (grad_enabled_)
    nodes_[r].back = [r, a, b](Tape& tp) {
      const auto& g = tp.nodes_[r].grad;
      auto& ga = tp.grad_of(a);
      auto& gb = tp.grad_of(b);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[ga.size() + i];
    };
  return r;
}

Tape::Ref Tape::concat_cols(Ref a, Ref b) {
  const std::size_t R = nodes_[a].rows, Ca = nodes_[a].cols, Cb = nodes_[b].cols;
  if (nodes_[b].rows != R) throw shape_error("concat_cols: row mismatch");
  const Ref r = push(R, Ca + Cb);
  auto& out = nodes_[r].val;
  for (std::size_t i = 0; i < R; ++i) {
    for (std::size_t j = 0; j < Ca; ++j)
      out[i * (Ca + Cb) + j] = nodes_[a].val[i * Ca + j];
    for (std::size_t j = 0; j < Cb; ++j)
      out[i * (Ca + Cb) + Ca + j] = nodes_[b].val[i * Cb + j];
  }
  if (grad_enabled_)
    nodes_[r].back = [r, a, b](Tape& tp) {
      const Node& nd = tp.nodes_[r];
      const Node& na2 = tp.nodes_[a];
      const Node& nb2 = tp.nodes_[b];
      const auto& g = nd.grad;
      auto& ga = tp.grad_of(a);
      auto& gb = tp.grad_of(b);
      for (std::size_t i = 0; i < na2.rows; ++i) {
        for (std::size_t j = 0; j < na2.cols; ++j)
          ga[i * na2.cols + j] += g[i * nd.cols + j];
        for (std::size_t j = 0; j < nb2.cols; ++j)
          gb[i * nb2.cols + j] += g[i * nd.cols + na2.cols + j];
      }
    };
  return r;
}

Tape::Ref Tape::slice_rows(Ref a, std::size_t r0, std::size_t r1) {
  const std::size_t R = nodes_[a].rows, C = nodes_[a].cols;
  if (r0 >= r1 || r1 > R) throw shape_error("slice_rows: bad range");
  const Ref r = push(r1 - r0, C);
  auto& out = nodes_[r].val;
  std::copy(nodes_[a].val.begin() + r0 * C, nodes_[a].val.begin() + r1 * C, out.begin());
  if (grad_enabled_)
    nodes_[r].back = [r, a, r0](Tape& tp) {
      const Node& nd = tp.nodes_[r];
      const auto& g = nd.grad;
      auto& ga = tp.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[r0 * nd.cols + i] += g[i];
    };
  return r;
}

Tape::Ref Tape::slice_cols(Ref a, std::size_t c0, std::size_t c1) {
  const std::size_t R = nodes_[a].rows, C = nodes_[a].cols;
  if (c0 >= c1 || c1 > C) throw shape_error("slice_cols: bad range");
  const Ref r = push(R, c1 - c0);
  auto& out = nodes_[r].val;
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = c0; j < c1; ++j)
      out[i * (c1 - c0) + (j - c0)] = nodes_[a].val[i * C + j];
  if (grad_enabled_)
    nodes_[r].back = [r, a, c0](Tape& tp) {
      const Node& nd = tp.nodes_[r];
      const Node& na2 = tp.nodes_[a];
      const auto& g = nd.grad;
      auto& ga = tp.grad_of(a);
      for (std::size_t i = 0; i < nd.rows; ++i)
        for (std::size_t j = 0; j < nd.cols; ++j)
          ga[i * na2.cols + c0 + j] += g[i * nd.cols + j];
    };
  return r;
}

Tape::Ref Tape::mean_rows(Ref a) {
  const std::size_t R = nodes_[a].rows, C = nodes_[a].cols;
  const Ref r = push(1, C);
  auto& out = nodes_[r].val;
  for (std::size_t j = 0; j < C; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < R; ++i) s += nodes_[a].val[i * C + j];
    out[j] = s / static_cast<double>(R);
  }
  if (grad_enabled_)
    nodes_[r].back = [r, a](Tape& tp) {
      const Node& na2 = tp.nodes_[a];
      const auto& g = tp.nodes_[r].grad;
      auto& ga = tp.grad_of(a);
      const double inv = 1.0 / static_cast<double>(na2.rows);
      for (std::size_t i = 0; i < na2.rows; ++i)
        for (std::size_t j = 0; j < na2.cols; ++j) ga[i * na2.cols + j] += g[j] * inv;
    };
  return r;
}

Tape::Ref Tape::embed(Ref table, const std::vector<int>& ids) {
  const std::size_t R = nodes_[table].rows, C = nodes_[table].cols;
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= R)
      throw vocab_error("embed: token id outside table");
  const Ref r = push(ids.size(), C);
  auto& out = nodes_[r].val;
  for (std::size_t i = 0; i < ids.size(); ++i)
    std::copy(nodes_[table].val.begin() + ids[i] * C,
              nodes_[table].val.begin() + (ids[i] + 1) * C, out.begin() + i * C);
  if (grad_enabled_)
    nodes_[r].back = [r, table, ids](Tape& tp) {
      const Node& nd = tp.nodes_[r];
      const auto& g = nd.grad;
      auto& gt = tp.grad_of(table);
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < nd.cols; ++j)
          gt[ids[i] * nd.cols + j] += g[i * nd.cols + j];
    };
  return r;
}

Tape::Ref Tape::rms_norm(Ref x, Ref w) {
  const Node& nx = nodes_[x];
  const Node& nw = nodes_[w];
  const bool broadcast = nw.rows == 1;
  if (nw.cols != nx.cols || (!broadcast && nw.rows != nx.rows))
    throw shape_error("rms_norm: weight must be 1 x cols or match x");
  constexpr double kEps = 1e-6;
  const std::size_t R = nx.rows, D = nx.cols;
  const Ref r = push(R, D);
  // Per-row inverse RMS, cached for backward.
  std::vector<double> inv_rms(R);
  for (std::size_t i = 0; i < R; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < D; ++j) {
      const double v = nodes_[x].val[i * D + j];
      ss += v * v;
    }
    inv_rms[i] = 1.0 / std::sqrt(ss / static_cast<double>(D) + kEps);
    for (std::size_t j = 0; j < D; ++j) {
      const double wv = broadcast ? nodes_[w].val[j] : nodes_[w].val[i * D + j];
      nodes_[r].val[i * D + j] = wv * nodes_[x].val[i * D + j] * inv_rms[i];
    }
  }
  if (grad_enabled_)
    nodes_[r].back = [r, x, w, broadcast, inv_rms](Tape& tp) {
      const Node& nd = tp.nodes_[r];
      const Node& nx2 = tp.nodes_[x];
      const Node& nw2 = tp.nodes_[w];
      const auto& g = nd.grad;
      auto& gx = tp.grad_of(x);
      auto& gw = tp.grad_of(w);
      const std::size_t D = nd.cols;
      for (std::size_t i = 0; i < nd.rows; ++i) {
        const double ir = inv_rms[i];
        // dot = sum_j g_ij w_ij x_ij, reused by every dx in the row
        double dot = 0.0;
        for (std::size_t j = 0; j < D; ++j) {
          const double wv = broadcast ? nw2.val[j] : nw2.val[i * D + j];
          const double xv = nx2.val[i * D + j];
          dot += g[i * D + j] * wv * xv;
          const double gwv = g[i * D + j] * xv * ir;
          if (broadcast)
            gw[j] += gwv;
          else
            gw[i * D + j] += gwv;
        }
        const double k = dot * ir * ir * ir / static_cast<double>(D);
        for (std::size_t j = 0; j < D; ++j) {
          const double wv = broadcast ? nw2.val[j] : nw2.val[i * D + j];
          gx[i * D + j] += g[i * D + j] * wv * ir - nx2.val[i * D + j] * k;
        }
      }
    };
  return r;
}

Tape::Ref Tape::causal_softmax(Ref scores, std::size_t prefix_cols) {
  const Node& ns = nodes_[scores];
  if (ns.cols != prefix_cols + ns.rows)
    throw shape_error("causal_softmax: cols must equal prefix_cols + rows");
  const std::size_t R = ns.rows, C = ns.cols;
  const Ref r = push(R, C);
  for (std::size_t i = 0; i < R; ++i) {
    const std::size_t vis = prefix_cols + i + 1;  // columns visible to row i
    const double* row = nodes_[scores].val.data() + i * C;
    for (std::size_t j = 0; j < vis; ++j)
      if (!std::isfinite(row[j])) throw numeric_error("causal_softmax: non-finite score");
    softmax_row(row, nodes_[r].val.data() + i * C, vis);
    // masked tail stays exactly 0
  }
  if (grad_enabled_)
    nodes_[r].back = [r, scores, prefix_cols](Tape& tp) {
      const Node& nd = tp.nodes_[r];
      const auto& g = nd.grad;
      const auto& p = nd.val;
      auto& gs = tp.grad_of(scores);
      const std::size_t C = nd.cols;
      for (std::size_t i = 0; i < nd.rows; ++i) {
        const std::size_t vis = prefix_cols + i + 1;
        double dot = 0.0;
        for (std::size_t j = 0; j < vis; ++j) dot += g[i * C + j] * p[i * C + j];
        for (std::size_t j = 0; j < vis; ++j)
          gs[i * C + j] += p[i * C + j] * (g[i * C + j] - dot);
      }
    };
  return r;
}

Tape::Ref Tape::row_log_softmax(Ref logits) {
  const std::size_t R = nodes_[logits].rows, C = nodes_[logits].cols;
  const Ref r = push(R, C);
  for (std::size_t i = 0; i < R; ++i) {
    const double* row = nodes_[logits].val.data() + i * C;
    double m = row[0];
    for (std::size_t j = 1; j < C; ++j) m = std::max(m, row[j]);
    double s = 0.0, c = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      const double y = std::exp(row[j] - m) - c;
      const double t = s + y;
      c = (t - s) - y;
      s = t;
    }
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < C; ++j) nodes_[r].val[i * C + j] = row[j] - lse;
  }
  if (grad_enabled_)
    nodes_[r].back = [r, logits](Tape& tp) {
      const Node& nd = tp.nodes_[r];
      const auto& g = nd.grad;
      auto& gl = tp.grad_of(logits);
      const std::size_t C = nd.cols;
      for (std::size_t i = 0; i < nd.rows; ++i) {
        double gsum = 0.0;
        for (std::size_t j = 0; j < C; ++j) gsum += g[i * C + j];
        for (std::size_t j = 0; j < C; ++j)
          gl[i * C + j] += g[i * C + j] - std::exp(nd.val[i * C + j]) * gsum;
      }
    };
  return r;
}

Tape::Ref Tape::row_entropy(Ref logits) {
  const std::size_t R = nodes_[logits].rows, C = nodes_[logits].cols;
  const Ref r = push(R, 1);
  // Cache probabilities for backward.
  std::vector<double> probs;
  if (grad_enabled_) probs.resize(R * C);
  for (std::size_t i = 0; i < R; ++i) {
    const double* row = nodes_[logits].val.data() + i * C;
    double m = row[0];
    for (std::size_t j = 1; j < C; ++j) m = std::max(m, row[j]);
    double s = 0.0, c = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      const double y = std::exp(row[j] - m) - c;
      const double t = s + y;
      c = (t - s) - y;
      s = t;
    }
    const double lse = m + std::log(s);
    double h = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      const double lp = row[j] - lse;
      const double p = std::exp(lp);
      if (p > 0.0) h -= p * lp;
      if (grad_enabled_) probs[i * C + j] = p;
    }
    nodes_[r].val[i] = h;
  }
  if (grad_enabled_)
    nodes_[r].back = [r, logits, probs](Tape& tp) {
      const Node& nd = tp.nodes_[r];
      const Node& nl2 = tp.nodes_[logits];
      const auto& g = nd.grad;
      auto& gl = tp.grad_of(logits);
      const std::size_t C = nl2.cols;
      for (std::size_t i = 0; i < nd.rows; ++i) {
        const double h = nd.val[i];
        for (std::size_t j = 0; j < C; ++j) {
          const double p = probs[i * C + j];
          if (p <= 0.0) continue;
          // dH/dl_j = -p_j (log p_j + H)
          gl[i * C + j] += g[i] * (-p * (std::log(p) + h));
        }
      }
    };
  return r;
}

Tape::Ref Tape::pick(Ref m, const std::vector<std::pair<int, int>>& coords) {
  const Node& nm = nodes_[m];
  for (const auto& [i, j] : coords)
    if (i < 0 || j < 0 || static_cast<std::size_t>(i) >= nm.rows ||
        static_cast<std::size_t>(j) >= nm.cols)
      throw shape_error("pick: coordinate out of range");
  const std::size_t C = nm.cols;
  const Ref r = push(1, coords.size());
  for (std::size_t t = 0; t < coords.size(); ++t)
    nodes_[r].val[t] = nodes_[m].val[coords[t].first * C + coords[t].second];
  if (grad_enabled_)
    nodes_[r].back = [r, m, coords](Tape& tp) {
      const Node& nm2 = tp.nodes_[m];
      const auto& g = tp.nodes_[r].grad;
      auto& gm = tp.grad_of(m);
      for (std::size_t t = 0; t < coords.size(); ++t)
        gm[coords[t].first * nm2.cols + coords[t].second] += g[t];
    };
  return r;
}

Tape::Ref Tape::sum(Ref a) {
  const Node& na = nodes_[a];
  const Ref r = push(1, 1);
  double s = 0.0;
  for (double v : nodes_[a].val) s += v;
  nodes_[r].val[0] = s;
  if (grad_enabled_)
    nodes_[r].back = [r, a](Tape& tp) {
      const double g = tp.nodes_[r].grad[0];
      auto& ga = tp.grad_of(a);
      for (double& v : ga) v += g;
    };
  (void)na;
  return r;
}

Tape::Ref Tape::mean(Ref a) {
  const Node& na = nodes_[a];
  const double inv = 1.0 / static_cast<double>(na.val.size());
  const Ref r = push(1, 1);
  double s = 0.0;
  for (double v : nodes_[a].val) s += v;
  nodes_[r].val[0] = s * inv;
  if (grad_enabled_)
    nodes_[r].back = [r, a, inv](Tape& tp) {
      const double g = tp.nodes_[r].grad[0] * inv;
      auto& ga = tp.grad_of(a);
      for (double& v : ga) v += g;
    };
  return r;
}

void Tape::backward(Ref loss, double seed) {
  if (!grad_enabled_) throw contract_error("backward: tape built with gradients disabled");
  if (nodes_[loss].val.size() != 1) throw contract_error("backward: loss must be 1x1");
  // Reset node gradients (leaf tensors keep accumulating across calls).
  for (Node& n : nodes_) {
    if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
  }
  grad_of(loss)[0] = seed;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.back && !n.grad.empty()) n.back(*this);
  }
}

// ---------------------------------------------------------------------------

std::vector<double> softmax(const std::vector<double>& logits) {
  if (logits.empty()) throw contract_error("softmax: empty input");
  for (double v : logits)
    if (!std::isfinite(v)) throw numeric_error("softmax: non-finite input");
  std::vector<double> out(logits.size());
  softmax_row(logits.data(), out.data(), logits.size());
  return out;
}

std::vector<double> rms_normalize(const std::vector<double>& x,
                                  const std::vector<double>& w) {
  if (x.size() != w.size()) throw shape_error("rms_normalize: length mismatch");
  if (x.empty()) throw shape_error("rms_normalize: empty input");
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = w[i] * x[i] * inv;
  return out;
}

double finite_difference_check(const std::function<double()>& f, Tensor& theta,
                               double step) {
  if (theta.grad.size() != theta.data.size())
    throw contract_error("finite_difference_check: analytic gradient missing");
  double worst = 0.0;
  for (std::size_t i = 0; i < theta.data.size(); ++i) {
    const double keep = theta.data[i];
    theta.data[i] = keep + step;
    const double up = f();
    theta.data[i] = keep - step;
    const double down = f();
    theta.data[i] = keep;
    const double central = (up - down) / (2.0 * step);
    const double analytic = theta.grad[i];
    const double err = std::abs(analytic - central) / std::max(1.0, std::abs(analytic));
    if (!(err <= worst)) worst = err;  // NaN propagates as the failure value
  }
  return worst;
}

double kahan_sum(const std::vector<double>& v) { return ksum(v.data(), v.size()); }

}  // namespace i2b
