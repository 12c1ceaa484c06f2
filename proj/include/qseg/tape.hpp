// Reverse-mode autodiff over dense f64 matrices. Define-by-run: every op
// computes its value eagerly when inserted, so model code can branch on
// values (mask thresholds, matching) while the tape stays a flat DAG.
//
// backward() accumulates into Parameter::grad; calling it twice without
// zeroing doubles the gradients, which is what per-layer auxiliary losses
// rely on. Broadcasting is limited to a 1 x C right operand over rows.
#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "qseg/matrix.hpp"
#include "qseg/scene.hpp"

namespace qseg {

struct Parameter {
  std::string name;
  Mat value;
  Mat grad;

  Parameter(std::string n, int r, int c) : name(std::move(n)), value(r, c), grad(r, c) {}
};

class ParameterStore {
 public:
  Parameter& create(const std::string& name, int rows, int cols) {
    auto [it, inserted] = items_.try_emplace(name, nullptr);
    if (!inserted) throw std::invalid_argument("parameter already exists: " + name);
    it->second = std::make_unique<Parameter>(name, rows, cols);
    return *it->second;
  }

  Parameter& get(const std::string& name) {
    const auto it = items_.find(name);
    if (it == items_.end()) throw std::invalid_argument("no such parameter: " + name);
    return *it->second;
  }
  const Parameter& get(const std::string& name) const {
    const auto it = items_.find(name);
    if (it == items_.end()) throw std::invalid_argument("no such parameter: " + name);
    return *it->second;
  }
  bool has(const std::string& name) const { return items_.count(name) != 0; }

  void zero_grads() {
    for (auto& [_, p] : items_) std::fill(p->grad.v.begin(), p->grad.v.end(), 0.0);
  }

  // Name-sorted, which keeps checkpoints and checksums canonical.
  template <typename F>
  void for_each(F&& f) {
    for (auto& [_, p] : items_) f(*p);
  }
  template <typename F>
  void for_each(F&& f) const {
    for (const auto& [_, p] : items_) f(*p);
  }

  size_t count() const { return items_.size(); }

 private:
  std::map<std::string, std::unique_ptr<Parameter>> items_;
};

struct Node {
  int id = -1;
  bool valid() const { return id >= 0; }
};

enum class Op : uint8_t {
  Input, Param,
  Add, Sub, Mul, Div, Affine,
  MatMul, Transpose,
  Relu, Sigmoid, Softplus, Sin, Cos, Abs,
  SoftmaxRows, LogSoftmaxRows, LayerNormRows,
  GatherRows, ScatterWSum, PoolRows, ConcatRows,
  RowSum, SumAll,
  StopGrad, StraightThrough,
};

class Tape {
 public:
  Tape() {
#ifdef NDEBUG
    check_finite = false;
#else
    check_finite = true;
#endif
  }

  bool check_finite;

  // ---- leaves ----

  Node input(Mat v) { return push(Op::Input, -1, -1, std::move(v)); }

  Node scalar(double x) { return input(Mat(1, 1, x)); }

  Node param(Parameter& p) {
    const auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return {it->second};
    Node n = push(Op::Param, -1, -1, p.value);
    nodes_[static_cast<size_t>(n.id)].param = &p;
    param_nodes_[&p] = n.id;
    return n;
  }

  // ---- elementwise / broadcast ----

  Node add(Node a, Node b) { return binary(Op::Add, a, b); }
  Node sub(Node a, Node b) { return binary(Op::Sub, a, b); }
  Node mul(Node a, Node b) { return binary(Op::Mul, a, b); }

  Node div(Node a, Node b) {
    const Mat& x = val(a);
    const Mat& y = val(b);
    require_shape(x.same_shape(y), "div");
    Mat out(x.rows, x.cols);
    for (size_t i = 0; i < x.size(); ++i) out.v[i] = x.v[i] / y.v[i];
    return push(Op::Div, a.id, b.id, std::move(out));
  }

  // a*x + b with scalar constants; covers plain scaling and constant shifts.
  Node affine(Node x, double a, double b) {
    const Mat& v = val(x);
    Mat out(v.rows, v.cols);
    for (size_t i = 0; i < v.size(); ++i) out.v[i] = a * v.v[i] + b;
    Node n = push(Op::Affine, x.id, -1, std::move(out));
    nodes_[static_cast<size_t>(n.id)].c0 = a;
    return n;
  }

  // ---- linear algebra ----

  Node matmul(Node a, Node b) {
    const Mat& x = val(a);
    const Mat& y = val(b);
    require_shape(x.cols == y.rows, "matmul");
    return push(Op::MatMul, a.id, b.id, qseg::matmul(x, y));
  }

  Node transpose(Node a) { return push(Op::Transpose, a.id, -1, transposed(val(a))); }

  // ---- nonlinearities ----

  Node relu(Node a) {
    Mat out = val(a);
    for (double& x : out.v) x = x > 0.0 ? x : 0.0;
    return push(Op::Relu, a.id, -1, std::move(out));
  }

  Node sigmoid(Node a) {
    Mat out = val(a);
    for (double& x : out.v) x = sigmoid_stable(x);
    return push(Op::Sigmoid, a.id, -1, std::move(out));
  }

  Node softplus(Node a) {
    Mat out = val(a);
    for (double& x : out.v) x = softplus_stable(x);
    return push(Op::Softplus, a.id, -1, std::move(out));
  }

  Node sin(Node a) {
    Mat out = val(a);
    for (double& x : out.v) x = std::sin(x);
    return push(Op::Sin, a.id, -1, std::move(out));
  }

  Node cos(Node a) {
    Mat out = val(a);
    for (double& x : out.v) x = std::cos(x);
    return push(Op::Cos, a.id, -1, std::move(out));
  }

  Node abs(Node a) {
    Mat out = val(a);
    for (double& x : out.v) x = std::fabs(x);
    return push(Op::Abs, a.id, -1, std::move(out));
  }

  // ---- row-wise reductions and normalizations ----

  Node softmax_rows(Node a) {
    const Mat& x = val(a);
    Mat out(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r) softmax_row(x.row(r), out.row(r), x.cols, false);
    return push(Op::SoftmaxRows, a.id, -1, std::move(out));
  }

  Node log_softmax_rows(Node a) {
    const Mat& x = val(a);
    Mat out(x.rows, x.cols);
    for (int r = 0; r < x.rows; ++r) softmax_row(x.row(r), out.row(r), x.cols, true);
    return push(Op::LogSoftmaxRows, a.id, -1, std::move(out));
  }

  Node layer_norm_rows(Node a, double eps = 1e-5) {
    const Mat& x = val(a);
    Mat out(x.rows, x.cols);
    Mat cache(x.rows, 2);  // mean, rstd per row
    for (int r = 0; r < x.rows; ++r) {
      const double* src = x.row(r);
      double mu = 0.0;
      for (int c = 0; c < x.cols; ++c) mu += src[c];
      mu /= x.cols;
      double var = 0.0;
      for (int c = 0; c < x.cols; ++c) {
        const double d = src[c] - mu;
        var += d * d;
      }
      var /= x.cols;
      const double rstd = 1.0 / std::sqrt(var + eps);
      double* dst = out.row(r);
      for (int c = 0; c < x.cols; ++c) dst[c] = (src[c] - mu) * rstd;
      cache.at(r, 0) = mu;
      cache.at(r, 1) = rstd;
    }
    Node n = push(Op::LayerNormRows, a.id, -1, std::move(out));
    nodes_[static_cast<size_t>(n.id)].aux_mat = std::move(cache);
    return n;
  }

  Node row_sum(Node a) {
    const Mat& x = val(a);
    Mat out(x.rows, 1);
    for (int r = 0; r < x.rows; ++r) {
      double acc = 0.0;
      const double* src = x.row(r);
      for (int c = 0; c < x.cols; ++c) acc += src[c];
      out.at(r, 0) = acc;
    }
    return push(Op::RowSum, a.id, -1, std::move(out));
  }

  Node sum_all(Node a) {
    const Mat& x = val(a);
    double acc = 0.0;
    for (double v : x.v) acc += v;
    return push(Op::SumAll, a.id, -1, Mat(1, 1, acc));
  }

  Node mean_all(Node a) {
    const Mat& x = val(a);
    if (x.size() == 0) throw std::invalid_argument("mean_all: empty");
    return affine(sum_all(a), 1.0 / static_cast<double>(x.size()), 0.0);
  }

  // ---- structural ops ----

  Node gather_rows(Node a, std::vector<int> rows) {
    const Mat& x = val(a);
    Mat out(static_cast<int>(rows.size()), x.cols);
    for (size_t r = 0; r < rows.size(); ++r) {
      if (rows[r] < 0 || rows[r] >= x.rows) throw std::invalid_argument("gather_rows: index out of range");
      std::copy(x.row(rows[r]), x.row(rows[r]) + x.cols, out.row(static_cast<int>(r)));
    }
    Node n = push(Op::GatherRows, a.id, -1, std::move(out));
    nodes_[static_cast<size_t>(n.id)].idx = std::move(rows);
    return n;
  }

  // out[i,:] = sum_k w[i,k] * content[idx[i,k],:]  (w and idx constant).
  Node scatter_weighted_sum(Node content, const Mat& w, const std::vector<int>& idx) {
    const Mat& x = val(content);
    const int S = w.rows, K = w.cols;
    if (static_cast<int>(idx.size()) != S * K)
      throw std::invalid_argument("scatter_weighted_sum: idx size mismatch");
    for (int i : idx)
      if (i < 0 || i >= x.rows) throw std::invalid_argument("scatter_weighted_sum: index out of range");
    Mat out(S, x.cols);
    for (int i = 0; i < S; ++i) {
      double* dst = out.row(i);
      for (int k = 0; k < K; ++k) {
        const double wv = w.at(i, k);
        const double* src = x.row(idx[static_cast<size_t>(i) * K + k]);
        for (int c = 0; c < x.cols; ++c) dst[c] += wv * src[c];
      }
    }
    Node n = push(Op::ScatterWSum, content.id, -1, std::move(out));
    auto& nd = nodes_[static_cast<size_t>(n.id)];
    nd.aux_mat = w;
    nd.idx = idx;
    nd.aux = K;
    return n;
  }

  // Mean-pool rows by partition; gradient splits uniformly over members.
  Node pool_rows(Node a, const Partition& part) {
    const Mat& x = val(a);
    Mat out = qseg::pool_rows(x, part);
    Node n = push(Op::PoolRows, a.id, -1, std::move(out));
    auto& nd = nodes_[static_cast<size_t>(n.id)];
    nd.idx = part.assign;
    nd.aux = part.count;
    return n;
  }

  Node concat_rows(Node a, Node b) {
    const Mat& x = val(a);
    const Mat& y = val(b);
    require_shape(x.cols == y.cols, "concat_rows");
    Mat out(x.rows + y.rows, x.cols);
    std::copy(x.v.begin(), x.v.end(), out.v.begin());
    std::copy(y.v.begin(), y.v.end(), out.v.begin() + static_cast<long>(x.size()));
    return push(Op::ConcatRows, a.id, b.id, std::move(out));
  }

  // ---- gradient routing ----

  Node stop_gradient(Node a) { return push(Op::StopGrad, a.id, -1, val(a)); }

  // Forward is a bitwise copy of `hard`; the gradient flows to `soft`
  // unchanged and `hard` receives none.
  Node straight_through(Node hard, Node soft) {
    require_shape(val(hard).same_shape(val(soft)), "straight_through");
    return push(Op::StraightThrough, hard.id, soft.id, val(hard));
  }

  // ---- access ----

  const Mat& val(Node n) const {
    check_node(n);
    return nodes_[static_cast<size_t>(n.id)].val;
  }

  size_t size() const { return nodes_.size(); }

  // Gradient of the last backward() w.r.t. any node (empty if unreached).
  const Mat& node_grad(Node n) const {
    check_node(n);
    if (grads_.size() != nodes_.size()) throw std::logic_error("node_grad: run backward first");
    return grads_[static_cast<size_t>(n.id)];
  }

  void backward(Node loss) {
    check_node(loss);
    const Mat& lv = val(loss);
    if (lv.rows != 1 || lv.cols != 1) throw std::invalid_argument("backward: loss must be 1x1");
    grads_.assign(nodes_.size(), Mat());
    grads_[static_cast<size_t>(loss.id)] = Mat(1, 1, 1.0);

    for (int i = loss.id; i >= 0; --i) {
      TapeNode& nd = nodes_[static_cast<size_t>(i)];
      Mat& g = grads_[static_cast<size_t>(i)];
      if (g.empty()) continue;
      switch (nd.op) {
        case Op::Input:
          break;
        case Op::Param:
          for (size_t k = 0; k < g.size(); ++k) nd.param->grad.v[k] += g.v[k];
          break;
        case Op::Add: {
          acc_same(nd.a, g);
          acc_maybe_broadcast(nd.b, g, +1.0);
          break;
        }
        case Op::Sub: {
          acc_same(nd.a, g);
          acc_maybe_broadcast(nd.b, g, -1.0);
          break;
        }
        case Op::Mul: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          const Mat& bv = nodes_[static_cast<size_t>(nd.b)].val;
          if (bv.rows == av.rows) {
            Mat da(av.rows, av.cols), db(av.rows, av.cols);
            for (size_t k = 0; k < g.size(); ++k) {
              da.v[k] = g.v[k] * bv.v[k];
              db.v[k] = g.v[k] * av.v[k];
            }
            acc(nd.a, std::move(da));
            acc(nd.b, std::move(db));
          } else {  // bv is 1 x C
            Mat da(av.rows, av.cols), db(1, av.cols);
            for (int r = 0; r < av.rows; ++r)
              for (int c = 0; c < av.cols; ++c) {
                da.at(r, c) = g.at(r, c) * bv.at(0, c);
                db.at(0, c) += g.at(r, c) * av.at(r, c);
              }
            acc(nd.a, std::move(da));
            acc(nd.b, std::move(db));
          }
          break;
        }
        case Op::Div: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          const Mat& bv = nodes_[static_cast<size_t>(nd.b)].val;
          Mat da(av.rows, av.cols), db(av.rows, av.cols);
          for (size_t k = 0; k < g.size(); ++k) {
            da.v[k] = g.v[k] / bv.v[k];
            db.v[k] = -g.v[k] * av.v[k] / (bv.v[k] * bv.v[k]);
          }
          acc(nd.a, std::move(da));
          acc(nd.b, std::move(db));
          break;
        }
        case Op::Affine: {
          Mat da(g.rows, g.cols);
          for (size_t k = 0; k < g.size(); ++k) da.v[k] = nd.c0 * g.v[k];
          acc(nd.a, std::move(da));
          break;
        }
        case Op::MatMul: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          const Mat& bv = nodes_[static_cast<size_t>(nd.b)].val;
          Mat& da = ensure(nd.a, av.rows, av.cols);
          macc_nt(da, g, bv);
          Mat& db = ensure(nd.b, bv.rows, bv.cols);
          macc_tn(db, av, g);
          break;
        }
        case Op::Transpose: {
          acc(nd.a, transposed(g));
          break;
        }
        case Op::Relu: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          Mat da(g.rows, g.cols);
          for (size_t k = 0; k < g.size(); ++k) da.v[k] = av.v[k] > 0.0 ? g.v[k] : 0.0;
          acc(nd.a, std::move(da));
          break;
        }
        case Op::Sigmoid: {
          Mat da(g.rows, g.cols);
          for (size_t k = 0; k < g.size(); ++k) {
            const double y = nd.val.v[k];
            da.v[k] = g.v[k] * y * (1.0 - y);
          }
          acc(nd.a, std::move(da));
          break;
        }
        case Op::Softplus: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          Mat da(g.rows, g.cols);
          for (size_t k = 0; k < g.size(); ++k) da.v[k] = g.v[k] * sigmoid_stable(av.v[k]);
          acc(nd.a, std::move(da));
          break;
        }
        case Op::Sin: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          Mat da(g.rows, g.cols);
          for (size_t k = 0; k < g.size(); ++k) da.v[k] = g.v[k] * std::cos(av.v[k]);
          acc(nd.a, std::move(da));
          break;
        }
        case Op::Cos: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          Mat da(g.rows, g.cols);
          for (size_t k = 0; k < g.size(); ++k) da.v[k] = -g.v[k] * std::sin(av.v[k]);
          acc(nd.a, std::move(da));
          break;
        }
        case Op::Abs: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          Mat da(g.rows, g.cols);
          for (size_t k = 0; k < g.size(); ++k) {
            const double s = av.v[k] > 0.0 ? 1.0 : (av.v[k] < 0.0 ? -1.0 : 0.0);
            da.v[k] = g.v[k] * s;
          }
          acc(nd.a, std::move(da));
          break;
        }
        case Op::SoftmaxRows: {
          Mat da(g.rows, g.cols);
          for (int r = 0; r < g.rows; ++r) {
            const double* y = nd.val.row(r);
            const double* gr = g.row(r);
            double dot = 0.0;
            for (int c = 0; c < g.cols; ++c) dot += gr[c] * y[c];
            double* d = da.row(r);
            for (int c = 0; c < g.cols; ++c) d[c] = y[c] * (gr[c] - dot);
          }
          acc(nd.a, std::move(da));
          break;
        }
        case Op::LogSoftmaxRows: {
          Mat da(g.rows, g.cols);
          for (int r = 0; r < g.rows; ++r) {
            const double* y = nd.val.row(r);  // log-probs
            const double* gr = g.row(r);
            double gsum = 0.0;
            for (int c = 0; c < g.cols; ++c) gsum += gr[c];
            double* d = da.row(r);
            for (int c = 0; c < g.cols; ++c) d[c] = gr[c] - std::exp(y[c]) * gsum;
          }
          acc(nd.a, std::move(da));
          break;
        }
        case Op::LayerNormRows: {
          const int C = g.cols;
          Mat da(g.rows, g.cols);
          for (int r = 0; r < g.rows; ++r) {
            const double rstd = nd.aux_mat.at(r, 1);
            const double* y = nd.val.row(r);
            const double* gr = g.row(r);
            double gmean = 0.0, gymean = 0.0;
            for (int c = 0; c < C; ++c) {
              gmean += gr[c];
              gymean += gr[c] * y[c];
            }
            gmean /= C;
            gymean /= C;
            double* d = da.row(r);
            for (int c = 0; c < C; ++c) d[c] = rstd * (gr[c] - gmean - y[c] * gymean);
          }
          acc(nd.a, std::move(da));
          break;
        }
        case Op::GatherRows: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          Mat& da = ensure(nd.a, av.rows, av.cols);
          for (size_t r = 0; r < nd.idx.size(); ++r) {
            const double* gr = g.row(static_cast<int>(r));
            double* d = da.row(nd.idx[r]);
            for (int c = 0; c < g.cols; ++c) d[c] += gr[c];
          }
          break;
        }
        case Op::ScatterWSum: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          Mat& da = ensure(nd.a, av.rows, av.cols);
          const int K = nd.aux;
          for (int i = 0; i < g.rows; ++i) {
            const double* gr = g.row(i);
            for (int k = 0; k < K; ++k) {
              const double wv = nd.aux_mat.at(i, k);
              double* d = da.row(nd.idx[static_cast<size_t>(i) * K + k]);
              for (int c = 0; c < g.cols; ++c) d[c] += wv * gr[c];
            }
          }
          break;
        }
        case Op::PoolRows: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          std::vector<int> sz(static_cast<size_t>(nd.aux), 0);
          for (int a : nd.idx) ++sz[static_cast<size_t>(a)];
          Mat da(av.rows, av.cols);
          for (int r = 0; r < av.rows; ++r) {
            const int grp = nd.idx[static_cast<size_t>(r)];
            const double inv = 1.0 / sz[static_cast<size_t>(grp)];
            const double* gr = g.row(grp);
            double* d = da.row(r);
            for (int c = 0; c < av.cols; ++c) d[c] = gr[c] * inv;
          }
          acc(nd.a, std::move(da));
          break;
        }
        case Op::ConcatRows: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          const Mat& bv = nodes_[static_cast<size_t>(nd.b)].val;
          Mat da(av.rows, av.cols), db(bv.rows, bv.cols);
          std::copy(g.v.begin(), g.v.begin() + static_cast<long>(av.size()), da.v.begin());
          std::copy(g.v.begin() + static_cast<long>(av.size()), g.v.end(), db.v.begin());
          acc(nd.a, std::move(da));
          acc(nd.b, std::move(db));
          break;
        }
        case Op::RowSum: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          Mat da(av.rows, av.cols);
          for (int r = 0; r < av.rows; ++r) {
            const double gv = g.at(r, 0);
            double* d = da.row(r);
            for (int c = 0; c < av.cols; ++c) d[c] = gv;
          }
          acc(nd.a, std::move(da));
          break;
        }
        case Op::SumAll: {
          const Mat& av = nodes_[static_cast<size_t>(nd.a)].val;
          acc(nd.a, Mat(av.rows, av.cols, g.at(0, 0)));
          break;
        }
        case Op::StopGrad:
          break;
        case Op::StraightThrough: {
          acc_same_to(nd.b, g);
          break;
        }
      }
      if (nd.op != Op::Param && nd.op != Op::Input) g = Mat();  // free as we go
    }
  }

 private:
  struct TapeNode {
    Op op;
    int a = -1, b = -1;
    Mat val;
    Parameter* param = nullptr;
    double c0 = 0.0;       // Affine scale
    int aux = 0;           // ScatterWSum K / PoolRows group count
    std::vector<int> idx;  // gather rows / scatter indices / pool assignment
    Mat aux_mat;           // scatter weights / layer_norm (mean, rstd) cache
  };

  std::vector<TapeNode> nodes_;
  std::vector<Mat> grads_;
  std::unordered_map<const Parameter*, int> param_nodes_;

  static double sigmoid_stable(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
  }

  static double softplus_stable(double x) {
    return (x > 0.0 ? x : 0.0) + std::log1p(std::exp(-std::fabs(x)));
  }

  static void softmax_row(const double* src, double* dst, int n, bool log_form) {
    double mx = src[0];
    for (int c = 1; c < n; ++c) mx = std::max(mx, src[c]);
    double sum = 0.0;
    for (int c = 0; c < n; ++c) {
      dst[c] = std::exp(src[c] - mx);
      sum += dst[c];
    }
    if (log_form) {
      const double lse = mx + std::log(sum);
      for (int c = 0; c < n; ++c) dst[c] = src[c] - lse;
    } else {
      const double inv = 1.0 / sum;
      for (int c = 0; c < n; ++c) dst[c] *= inv;
    }
  }

  void check_node(Node n) const {
    if (n.id < 0 || n.id >= static_cast<int>(nodes_.size()))
      throw std::invalid_argument("node does not belong to this tape");
  }

  Node binary(Op op, Node a, Node b) {
    const Mat& x = val(a);
    const Mat& y = val(b);
    const bool broadcast = y.rows == 1 && x.rows != 1 && y.cols == x.cols;
    require_shape(x.same_shape(y) || broadcast, "elementwise op wants equal shapes or 1xC rhs");
    Mat out(x.rows, x.cols);
    if (broadcast) {
      for (int r = 0; r < x.rows; ++r) {
        const double* xr = x.row(r);
        double* d = out.row(r);
        for (int c = 0; c < x.cols; ++c) {
          const double yv = y.at(0, c);
          d[c] = op == Op::Add ? xr[c] + yv : op == Op::Sub ? xr[c] - yv : xr[c] * yv;
        }
      }
    } else {
      for (size_t k = 0; k < x.size(); ++k)
        out.v[k] = op == Op::Add ? x.v[k] + y.v[k] : op == Op::Sub ? x.v[k] - y.v[k] : x.v[k] * y.v[k];
    }
    return push(op, a.id, b.id, std::move(out));
  }

  Node push(Op op, int a, int b, Mat val) {
    if (check_finite) {
      for (double x : val.v)
        if (!std::isfinite(x))
          throw std::runtime_error("non-finite value produced by node " + std::to_string(nodes_.size()));
    }
    TapeNode nd;
    nd.op = op;
    nd.a = a;
    nd.b = b;
    nd.val = std::move(val);
    nodes_.push_back(std::move(nd));
    return {static_cast<int>(nodes_.size()) - 1};
  }

  Mat& ensure(int id, int rows, int cols) {
    Mat& g = grads_[static_cast<size_t>(id)];
    if (g.empty()) g = Mat(rows, cols);
    return g;
  }

  void acc(int id, Mat&& m) {
    Mat& g = grads_[static_cast<size_t>(id)];
    if (g.empty()) {
      g = std::move(m);
    } else {
      for (size_t k = 0; k < g.size(); ++k) g.v[k] += m.v[k];
    }
  }

  void acc_same(int id, const Mat& g) {
    Mat& d = ensure(id, g.rows, g.cols);
    for (size_t k = 0; k < g.size(); ++k) d.v[k] += g.v[k];
  }

  void acc_same_to(int id, const Mat& g) { acc_same(id, g); }

  // For Add/Sub right-hand sides which may be broadcast 1 x C rows.
  void acc_maybe_broadcast(int id, const Mat& g, double sign) {
    const Mat& bv = nodes_[static_cast<size_t>(id)].val;
    if (bv.rows == g.rows) {
      Mat m(g.rows, g.cols);
      for (size_t k = 0; k < g.size(); ++k) m.v[k] = sign * g.v[k];
      acc(id, std::move(m));
    } else {
      Mat m(1, g.cols);
      for (int r = 0; r < g.rows; ++r)
        for (int c = 0; c < g.cols; ++c) m.at(0, c) += sign * g.at(r, c);
      acc(id, std::move(m));
    }
  }
};

// Max over entries of |analytic - central difference| / max(1e-8, |analytic| + |numeric|).
// `build` must construct the loss from current parameter values on a fresh tape.
inline double finite_diff_check(const std::function<Node(Tape&)>& build, Parameter& p, double h) {
  if (h <= 0.0) throw std::invalid_argument("finite_diff_check: h must be positive");
  const Mat saved_grad = p.grad;
  std::fill(p.grad.v.begin(), p.grad.v.end(), 0.0);
  {
    Tape t;
    Node loss = build(t);
    t.backward(loss);
  }
  const Mat analytic = p.grad;
  p.grad = saved_grad;

  const auto eval = [&]() {
    Tape t;
    return t.val(build(t)).at(0, 0);
  };

  double worst = 0.0;
  for (size_t k = 0; k < p.value.size(); ++k) {
    const double orig = p.value.v[k];
    p.value.v[k] = orig + h;
    const double up = eval();
    p.value.v[k] = orig - h;
    const double dn = eval();
    p.value.v[k] = orig;
    const double numeric = (up - dn) / (2.0 * h);
    const double a = analytic.v[k];
    const double err = std::fabs(a - numeric) / std::max(1e-8, std::fabs(a) + std::fabs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace qseg
