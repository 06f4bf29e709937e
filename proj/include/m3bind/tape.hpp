#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "m3bind/common.hpp"
#include "m3bind/tensor.hpp"

namespace m3bind {

using NodeId = std::size_t;

// Gradients produced by a backward pass, keyed by node id. Every tracked
// leaf is present (zero tensor when the loss does not depend on it).
class GradMap {
 public:
  explicit GradMap(std::size_t node_count) : grads_(node_count) {}

  bool has(NodeId id) const { return id < grads_.size() && grads_[id].has_value(); }

  const Tensor& at(NodeId id) const {
    if (!has(id)) throw ValueError("GradMap: no gradient recorded for node " + std::to_string(id));
    return *grads_[id];
  }

  void accumulate(NodeId id, const Tensor& g) {
    if (!grads_[id]) {
      grads_[id] = g;
    } else {
      Tensor& t = *grads_[id];
      for (std::size_t i = 0; i < t.size(); ++i) t[i] += g[i];
    }
  }

  void ensure_zero(NodeId id, const std::vector<std::size_t>& shape) {
    if (!grads_[id]) grads_[id] = Tensor::zeros(shape);
  }

  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<std::optional<Tensor>> grads_;
};

// Append-only record of primitive operations; node ids are topologically
// ordered by construction (inputs always precede their consumers). A tape is
// single-owner: build a fresh one per forward pass.
class Tape {
 public:
  enum class Op : std::uint8_t {
    kLeaf,
    kAdd,
    kSub,
    kMul,
    kScale,      // scalar constant stored in the node
    kExp,
    kTanh,
    kAddBias,
    kMatmul,
    kTranspose,
    kRowNormalize,
    kLogSoftmaxRows,
    kMse,
    kSumDiag,
    kReduceSum,
    kReduceMean,
    kGatherRows,
    kEmbedMean,
    kMulScalarNode,  // tensor input a, scalar node input b
  };

  struct Node {
    Op op;
    NodeId a = kNone;
    NodeId b = kNone;
    Tensor value;
    double scalar = 0.0;
    bool tracked = false;
    std::shared_ptr<const std::vector<std::uint32_t>> ids;
    std::shared_ptr<const std::vector<std::vector<std::uint32_t>>> seqs;
  };

  static constexpr NodeId kNone = static_cast<NodeId>(-1);

  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(NodeId id) const { return node(id).value; }
  bool tracked(NodeId id) const { return node(id).tracked; }

  // Leaves: tracked leaves receive gradients, constants do not.
  NodeId input(Tensor v) { return push_leaf(std::move(v), true); }
  NodeId constant(Tensor v) { return push_leaf(std::move(v), false); }

  NodeId add(NodeId a, NodeId b) { return push(Op::kAdd, m3bind::add(value(a), value(b)), a, b); }
  NodeId sub(NodeId a, NodeId b) { return push(Op::kSub, m3bind::sub(value(a), value(b)), a, b); }
  NodeId mul(NodeId a, NodeId b) { return push(Op::kMul, m3bind::mul(value(a), value(b)), a, b); }

  NodeId scale(NodeId a, double c) {
    NodeId id = push(Op::kScale, m3bind::scale(value(a), c), a);
    nodes_.back().scalar = c;
    return id;
  }

  NodeId exp(NodeId a) { return push(Op::kExp, exp_ew(value(a)), a); }
  NodeId tanh(NodeId a) { return push(Op::kTanh, tanh_ew(value(a)), a); }

  NodeId add_bias(NodeId x, NodeId bias) {
    return push(Op::kAddBias, m3bind::add_bias(value(x), value(bias)), x, bias);
  }

  NodeId matmul(NodeId a, NodeId b) {
    return push(Op::kMatmul, m3bind::matmul(value(a), value(b)), a, b);
  }

  NodeId transpose(NodeId a) { return push(Op::kTranspose, m3bind::transpose(value(a)), a); }

  NodeId row_l2_normalize(NodeId a) {
    return push(Op::kRowNormalize, m3bind::row_l2_normalize(value(a)), a);
  }

  NodeId log_softmax_rows(NodeId a) {
    return push(Op::kLogSoftmaxRows, m3bind::log_softmax_rows(value(a)), a);
  }

  NodeId mse(NodeId a, NodeId b) { return push(Op::kMse, m3bind::mse(value(a), value(b)), a, b); }

  NodeId sum_diag(NodeId a) { return push(Op::kSumDiag, m3bind::sum_diag(value(a)), a); }
  NodeId reduce_sum(NodeId a) { return push(Op::kReduceSum, m3bind::reduce_sum(value(a)), a); }
  NodeId reduce_mean(NodeId a) { return push(Op::kReduceMean, m3bind::reduce_mean(value(a)), a); }

  NodeId gather_rows(NodeId table, std::vector<std::uint32_t> ids) {
    auto shared = std::make_shared<const std::vector<std::uint32_t>>(std::move(ids));
    NodeId id = push(Op::kGatherRows, m3bind::gather_rows(value(table), *shared), table);
    nodes_.back().ids = std::move(shared);
    return id;
  }

  NodeId embed_mean(NodeId table, std::vector<std::vector<std::uint32_t>> seqs) {
    auto shared = std::make_shared<const std::vector<std::vector<std::uint32_t>>>(std::move(seqs));
    NodeId id = push(Op::kEmbedMean, m3bind::embed_mean(value(table), *shared), table);
    nodes_.back().seqs = std::move(shared);
    return id;
  }

  // y = s * x where s is a scalar node (used for learnable temperature).
  NodeId mul_scalar_node(NodeId x, NodeId s) {
    const double sv = value(s).item();
    return push(Op::kMulScalarNode, m3bind::scale(value(x), sv), x, s);
  }

  // Exact reverse-mode gradients of a scalar loss node for every node on the
  // tape. Over an empty tape this is a no-op returning an empty map.
  GradMap backward(NodeId loss) const {
    GradMap grads(nodes_.size());
    if (nodes_.empty()) return grads;
    const Node& ln = node(loss);
    if (ln.value.size() != 1) {
      throw ShapeError("backward: loss node must be scalar, got " + ln.value.shape_str());
    }
    grads.accumulate(loss, Tensor::scalar(1.0));
    for (NodeId id = nodes_.size(); id-- > 0;) {
      if (!grads.has(id)) continue;
      propagate(id, grads.at(id), grads);
    }
    // Tracked leaves untouched by the loss still report a zero gradient.
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      if (nodes_[id].tracked) grads.ensure_zero(id, nodes_[id].value.shape());
    }
    return grads;
  }

 private:
  const Node& node(NodeId id) const {
    if (id >= nodes_.size()) throw ValueError("Tape: node id " + std::to_string(id) + " out of range");
    return nodes_[id];
  }

  NodeId push_leaf(Tensor v, bool tracked) {
    if (!v.all_finite()) throw NumericError("Tape: non-finite values in leaf tensor");
    Node n;
    n.op = Op::kLeaf;
    n.value = std::move(v);
    n.tracked = tracked;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  NodeId push(Op op, Tensor value, NodeId a, NodeId b = kNone) {
    check_id(a);
    if (b != kNone) check_id(b);
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  void check_id(NodeId id) const {
    if (id >= nodes_.size()) {
      throw ValueError("Tape: input node id " + std::to_string(id) + " not yet recorded");
    }
  }

  void propagate(NodeId id, const Tensor& g, GradMap& grads) const {
    const Node& n = nodes_[id];
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kAdd:
        grads.accumulate(n.a, g);
        grads.accumulate(n.b, g);
        break;
      case Op::kSub:
        grads.accumulate(n.a, g);
        grads.accumulate(n.b, m3bind::scale(g, -1.0));
        break;
      case Op::kMul:
        grads.accumulate(n.a, m3bind::mul(g, nodes_[n.b].value));
        grads.accumulate(n.b, m3bind::mul(g, nodes_[n.a].value));
        break;
      case Op::kScale:
        grads.accumulate(n.a, m3bind::scale(g, n.scalar));
        break;
      case Op::kExp:
        grads.accumulate(n.a, m3bind::mul(g, n.value));
        break;
      case Op::kTanh: {
        Tensor d = n.value;  // 1 - tanh^2 from the saved output
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = g[i] * (1.0 - d[i] * d[i]);
        grads.accumulate(n.a, d);
        break;
      }
      case Op::kAddBias: {
        grads.accumulate(n.a, g);
        const std::size_t rows = g.rows(), cols = g.cols();
        Tensor db({cols});
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) db[c] += g.at(r, c);
        grads.accumulate(n.b, db);
        break;
      }
      case Op::kMatmul:
        grads.accumulate(n.a, matmul_nt(g, nodes_[n.b].value));
        grads.accumulate(n.b, matmul_tn(nodes_[n.a].value, g));
        break;
      case Op::kTranspose:
        grads.accumulate(n.a, m3bind::transpose(g));
        break;
      case Op::kRowNormalize: {
        const Tensor& x = nodes_[n.a].value;
        const Tensor& y = n.value;
        const std::size_t rows = x.rows(), cols = x.cols();
        Tensor dx({rows, cols});
        for (std::size_t r = 0; r < rows; ++r) {
          double norm = 0.0, gy = 0.0;
          for (std::size_t c = 0; c < cols; ++c) {
            norm += x.at(r, c) * x.at(r, c);
            gy += g.at(r, c) * y.at(r, c);
          }
          norm = std::sqrt(norm);
          for (std::size_t c = 0; c < cols; ++c) {
            dx.at(r, c) = (g.at(r, c) - gy * y.at(r, c)) / norm;
          }
        }
        grads.accumulate(n.a, dx);
        break;
      }
      case Op::kLogSoftmaxRows: {
        const Tensor& y = n.value;
        const std::size_t rows = y.rows(), cols = y.cols();
        Tensor dx({rows, cols});
        for (std::size_t r = 0; r < rows; ++r) {
          double gsum = 0.0;
          for (std::size_t c = 0; c < cols; ++c) gsum += g.at(r, c);
          for (std::size_t c = 0; c < cols; ++c) {
            dx.at(r, c) = g.at(r, c) - std::exp(y.at(r, c)) * gsum;
          }
        }
        grads.accumulate(n.a, dx);
        break;
      }
      case Op::kMse: {
        const Tensor& a = nodes_[n.a].value;
        const Tensor& b = nodes_[n.b].value;
        const double gs = g.item() * 2.0 / static_cast<double>(a.size());
        Tensor da = a, db = b;
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double d = gs * (a[i] - b[i]);
          da[i] = d;
          db[i] = -d;
        }
        grads.accumulate(n.a, da);
        grads.accumulate(n.b, db);
        break;
      }
      case Op::kSumDiag: {
        const Tensor& x = nodes_[n.a].value;
        Tensor dx(x.shape());
        const double gs = g.item();
        for (std::size_t i = 0; i < x.rows(); ++i) dx.at(i, i) = gs;
        grads.accumulate(n.a, dx);
        break;
      }
      case Op::kReduceSum: {
        const Tensor& x = nodes_[n.a].value;
        grads.accumulate(n.a, Tensor::filled(x.shape(), g.item()));
        break;
      }
      case Op::kReduceMean: {
        const Tensor& x = nodes_[n.a].value;
        grads.accumulate(n.a, Tensor::filled(x.shape(), g.item() / static_cast<double>(x.size())));
        break;
      }
      case Op::kGatherRows: {
        const Tensor& table = nodes_[n.a].value;
        Tensor dt(table.shape());
        const std::size_t d = table.cols();
        const auto& ids = *n.ids;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          double* dst = dt.data() + ids[i] * d;
          const double* src = g.data() + i * d;
          for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
        }
        grads.accumulate(n.a, dt);
        break;
      }
      case Op::kEmbedMean: {
        const Tensor& table = nodes_[n.a].value;
        Tensor dt(table.shape());
        const std::size_t d = table.cols();
        const auto& seqs = *n.seqs;
        for (std::size_t i = 0; i < seqs.size(); ++i) {
          const double inv = 1.0 / static_cast<double>(seqs[i].size());
          const double* src = g.data() + i * d;
          for (std::uint32_t tok : seqs[i]) {
            double* dst = dt.data() + tok * d;
            for (std::size_t c = 0; c < d; ++c) dst[c] += inv * src[c];
          }
        }
        grads.accumulate(n.a, dt);
        break;
      }
      case Op::kMulScalarNode: {
        const Tensor& x = nodes_[n.a].value;
        const double sv = nodes_[n.b].value.item();
        grads.accumulate(n.a, m3bind::scale(g, sv));
        double acc = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i) acc += g[i] * x[i];
        grads.accumulate(n.b, Tensor::scalar(acc));
        break;
      }
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace m3bind
