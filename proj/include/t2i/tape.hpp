#pragma once

#include <functional>
#include <unordered_set>
#include <vector>

#include "t2i/common.hpp"
#include "t2i/tensor.hpp"

namespace t2i {

// Dynamic reverse-mode tape, rebuilt on every forward pass. Ops append one
// node each; backward() zeroes every gradient the tape touches, seeds the
// loss gradient with 1 and walks the nodes in reverse. Zero-then-walk makes
// repeated backward() calls bit-identical; multiple uses of one tensor
// accumulate additively inside a single walk.
struct Tape {
    struct Node {
        std::function<void()> backward;
    };

    std::vector<Node> nodes;
    std::vector<Tensor> touched;

    void reset() {
        nodes.clear();
        touched.clear();
        seen_.clear();
    }

    size_t size() const { return nodes.size(); }

    void touch(const Tensor& t) {
        if (!t.defined() || !t.requires_grad()) return;
        if (seen_.insert(t.d.get()).second) touched.push_back(t);
    }

    void record(std::function<void()> backward) {
        nodes.push_back({std::move(backward)});
    }

    void backward(Tensor& loss) {
        check_dim(loss.numel() == 1, "backward() requires a scalar loss");
        check(loss.requires_grad(), "loss does not require grad");
        for (auto& t : touched) {
            t.grad();  // allocate
            t.zero_grad();
        }
        loss.grad()[0] = 1.0f;
        for (size_t i = nodes.size(); i-- > 0;) nodes[i].backward();
    }

    // Backward from an arbitrary output with an explicit upstream gradient.
    void backward_seeded(Tensor& out, const std::vector<float>& seed) {
        check_dim(static_cast<int64_t>(seed.size()) == out.numel(), "seed size mismatch");
        check(out.requires_grad(), "output does not require grad");
        for (auto& t : touched) {
            t.grad();
            t.zero_grad();
        }
        std::copy(seed.begin(), seed.end(), out.grad());
        for (size_t i = nodes.size(); i-- > 0;) nodes[i].backward();
    }

  private:
    std::unordered_set<const TensorData*> seen_;
};

}  // namespace t2i
