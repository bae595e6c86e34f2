#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "fsadapt/common.hpp"

namespace fsadapt {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// One named block of a flat parameter vector (a weight matrix or a bias).
struct Segment {
    std::string id;
    std::size_t rows = 0;
    std::size_t cols = 1;
    std::size_t size() const { return rows * cols; }
};

// Flat real vector with a declared segment layout. Houses shared weights,
// per-environment particular parameters, hyper-weights and multipliers alike;
// solvers treat it as a plain vector, models interpret the segments.
struct ParamVector {
    Vec values;
    std::vector<Segment> layout;

    ParamVector() = default;
    explicit ParamVector(std::vector<Segment> segs) : layout(std::move(segs)) {
        values = Vec::Zero(static_cast<Eigen::Index>(layout_size(layout)));
    }
    ParamVector(Vec v, std::vector<Segment> segs) : values(std::move(v)), layout(std::move(segs)) {
        if (static_cast<std::size_t>(values.size()) != layout_size(layout))
            throw ConfigError("ParamVector: value count " + std::to_string(values.size()) +
                              " does not match layout size " + std::to_string(layout_size(layout)));
    }

    std::size_t size() const { return static_cast<std::size_t>(values.size()); }

    bool all_finite() const { return values.allFinite(); }

    static std::size_t layout_size(const std::vector<Segment>& segs) {
        std::size_t total = 0;
        for (const auto& s : segs) total += s.size();
        return total;
    }
};

inline ParamVector zeros_like(const ParamVector& p) {
    ParamVector q;
    q.values = Vec::Zero(p.values.size());
    q.layout = p.layout;
    return q;
}

}  // namespace fsadapt
