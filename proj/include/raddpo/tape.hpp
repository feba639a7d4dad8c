#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "raddpo/tensor.hpp"

namespace raddpo::ad {

// Define-by-run reverse-mode tape. Nodes are appended in execution order, so
// reverse creation order is a valid reverse topological order. The tape is
// rebuilt every step and confined to one thread.
class Tape {
public:
    // Deposits d(loss)/d(node output) into parent accumulators via acc().
    using BackwardFn = std::function<void(const double* grad_out, Tape& tape)>;

    // Registers a leaf (typically a parameter). Returns a tracked handle
    // sharing storage with t.
    Tensor watch(const Tensor& t) {
        Tensor tracked = t;
        tracked.set_node(add_node({}, t.shape(), nullptr));
        return tracked;
    }

    int add_node(std::vector<int> parents, const std::vector<size_t>& out_shape, BackwardFn fn) {
        nodes_.push_back(Node{std::move(parents), std::move(fn), Tensor::count(out_shape)});
        grads_.emplace_back();
        return static_cast<int>(nodes_.size()) - 1;
    }

    size_t num_nodes() const { return nodes_.size(); }

    // Accumulator buffer for a node, zero-initialized on first touch.
    // node < 0 (detached parent) yields nullptr and the caller skips it.
    double* acc(int node, size_t n) {
        if (node < 0) return nullptr;
        auto& g = grads_[static_cast<size_t>(node)];
        if (g.empty()) g.assign(n, 0.0);
        return g.data();
    }

    // Reverse pass from a scalar loss. Nodes never reached keep an empty
    // (all-zero) gradient. Callable repeatedly; each call starts fresh.
    void backward(const Tensor& loss) {
        if (!loss.is_scalar()) {
            throw std::invalid_argument("backward: loss must be a scalar");
        }
        if (!loss.tracked() || static_cast<size_t>(loss.node()) >= nodes_.size()) {
            throw std::invalid_argument("backward: loss is not recorded on this tape");
        }
        for (auto& g : grads_) g.clear();
        const int root = loss.node();
        *acc(root, 1) = 1.0;
        for (int i = root; i >= 0; --i) {
            const Node& n = nodes_[static_cast<size_t>(i)];
            const auto& g = grads_[static_cast<size_t>(i)];
            if (g.empty() || !n.backward) continue;
            n.backward(g.data(), *this);
        }
    }

    // Gradient of a tracked tensor after backward(); zeros if unreached.
    std::vector<double> grad_of(const Tensor& t) const {
        if (!t.tracked()) {
            return std::vector<double>(t.size(), 0.0);
        }
        const auto& g = grads_.at(static_cast<size_t>(t.node()));
        if (g.empty()) return std::vector<double>(t.size(), 0.0);
        return g;
    }

    const double* grad_ptr(const Tensor& t) const {
        if (!t.tracked()) return nullptr;
        const auto& g = grads_.at(static_cast<size_t>(t.node()));
        return g.empty() ? nullptr : g.data();
    }

private:
    struct Node {
        std::vector<int> parents;
        BackwardFn backward;
        size_t out_size;
    };

    std::vector<Node> nodes_;
    std::vector<std::vector<double>> grads_;
};

} // namespace raddpo::ad
