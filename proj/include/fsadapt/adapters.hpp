#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "fsadapt/network.hpp"

namespace fsadapt::adapters {

struct AdapterSpec {
    std::size_t layer_index = 0;
    int channels = 0;
};

// Base model phi(w, v; x): a trunk whose flagged layers compute
// alpha .* (W x) + (b + beta), one (alpha, beta) pair per channel. The
// concatenation of all (alpha_k, beta_k) is exactly the particular-parameter
// vector v; everything else is the shared parameter w.
struct BaseModel {
    nn::Network trunk;
    std::vector<AdapterSpec> adapters;

    static BaseModel from_trunk(nn::Network t) {
        t.validate();
        BaseModel m;
        for (std::size_t i = 0; i < t.layers.size(); ++i)
            if (t.layers[i].adapter) m.adapters.push_back({i, t.layers[i].channels()});
        m.trunk = std::move(t);
        return m;
    }

    std::size_t v_size() const { return trunk.adapter_value_count(); }
    std::size_t w_size() const { return trunk.param_count(); }

    // Identity initialization: scale one, shift zero (the base model then
    // equals the adapter-free trunk exactly).
    ParamVector identity_v() const {
        ParamVector v(trunk.adapter_layout());
        std::size_t off = 0;
        for (const auto& a : adapters) {
            v.values.segment(off, a.channels).setOnes();
            off += 2 * static_cast<std::size_t>(a.channels);
        }
        return v;
    }

    // Fine-tuned value count vs. the full weight count of the adapter layers.
    std::size_t adapter_weight_count() const {
        std::size_t n = 0;
        for (const auto& a : adapters) n += trunk.layers[a.layer_index].param_count();
        return n;
    }
};

inline Mat base_forward_batch(const BaseModel& m, const ParamVector& w, const ParamVector& v, const Mat& X) {
    return nn::forward(m.trunk, w, X, &v);
}

inline Vec base_forward(const BaseModel& m, const ParamVector& w, const ParamVector& v, const Vec& x) {
    return base_forward_batch(m, w, v, x);
}

// Hypernetwork varphi(u; x): an embedding trunk feeding one generator head per
// adapter; head k emits (alpha_k, beta_k). The joint parameters form u.
struct HyperNet {
    nn::Network embed;
    std::vector<nn::Network> generators;

    std::size_t param_count() const {
        std::size_t n = embed.param_count();
        for (const auto& g : generators) n += g.param_count();
        return n;
    }

    std::size_t v_size() const {
        std::size_t n = 0;
        for (const auto& g : generators) n += static_cast<std::size_t>(g.output_size());
        return n;
    }

    std::vector<Segment> layout() const {
        std::vector<Segment> segs;
        for (auto s : embed.layout()) {
            s.id = "embed." + s.id;
            segs.push_back(std::move(s));
        }
        for (std::size_t k = 0; k < generators.size(); ++k) {
            for (auto s : generators[k].layout()) {
                s.id = "gen" + std::to_string(k) + "." + s.id;
                segs.push_back(std::move(s));
            }
        }
        return segs;
    }

    void validate_against(const BaseModel& m) const {
        embed.validate();
        if (generators.size() != m.adapters.size())
            throw ConfigError("hypernet: " + std::to_string(generators.size()) + " generators for " +
                              std::to_string(m.adapters.size()) + " adapters");
        for (std::size_t k = 0; k < generators.size(); ++k) {
            generators[k].validate();
            if (generators[k].input_size() != embed.output_size())
                throw ConfigError("hypernet: generator " + std::to_string(k) + " input does not match embedding");
            if (generators[k].output_size() != 2 * m.adapters[k].channels)
                throw ConfigError("hypernet: generator " + std::to_string(k) + " must emit " +
                                  std::to_string(2 * m.adapters[k].channels) + " values");
        }
    }
};

inline ParamVector init_hyper_params(const HyperNet& h, Rng& rng) {
    ParamVector u(h.layout());
    std::size_t off = 0;
    auto fill = [&](const nn::Network& net) {
        ParamVector p = nn::init_params(net, rng);
        u.values.segment(off, p.size()) = p.values;
        off += p.size();
    };
    fill(h.embed);
    for (const auto& g : h.generators) fill(g);
    return u;
}

namespace detail {

inline ParamVector slice_params(const nn::Network& net, const Vec& u, std::size_t off) {
    return ParamVector(u.segment(off, net.param_count()), net.layout());
}

}  // namespace detail

struct HyperTape {
    nn::Tape embed_tape;
    std::vector<nn::Tape> gen_tapes;
    Mat E;  // embedding batch
};

// Candidate particular parameters for each input column: rows follow the base
// model's adapter layout (alpha_k then beta_k, adapters in trunk order).
inline Mat hyper_forward_batch(const HyperNet& h, const ParamVector& u, const Mat& X, HyperTape* tape = nullptr) {
    if (u.size() != h.param_count())
        throw ConfigError("hyper_forward: parameter vector size " + std::to_string(u.size()) +
                          " does not match hypernet parameter count " + std::to_string(h.param_count()));
    std::size_t off = 0;
    ParamVector pe = detail::slice_params(h.embed, u.values, off);
    off += h.embed.param_count();
    if (tape) tape->gen_tapes.assign(h.generators.size(), nn::Tape());
    Mat E = nn::forward(h.embed, pe, X, nullptr, tape ? &tape->embed_tape : nullptr);
    Mat V(static_cast<Eigen::Index>(h.v_size()), X.cols());
    Eigen::Index row = 0;
    for (std::size_t k = 0; k < h.generators.size(); ++k) {
        ParamVector pg = detail::slice_params(h.generators[k], u.values, off);
        off += h.generators[k].param_count();
        Mat G = nn::forward(h.generators[k], pg, E, nullptr, tape ? &tape->gen_tapes[k] : nullptr);
        V.middleRows(row, G.rows()) = G;
        row += G.rows();
    }
    if (tape) tape->E = std::move(E);
    return V;
}

inline ParamVector hyper_forward(const HyperNet& h, const BaseModel& m, const ParamVector& u, const Vec& x) {
    Mat V = hyper_forward_batch(h, u, x);
    return ParamVector(V.col(0), m.trunk.adapter_layout());
}

// Pulls an arbitrary cotangent on the generated values back to u.
inline ParamVector hyper_backward(const HyperNet& h, const ParamVector& u, const HyperTape& tape, const Mat& dV) {
    ParamVector du(h.layout());
    Mat dE = Mat::Zero(tape.E.rows(), tape.E.cols());
    std::size_t off = h.embed.param_count();
    Eigen::Index row = 0;
    for (std::size_t k = 0; k < h.generators.size(); ++k) {
        const auto& gnet = h.generators[k];
        ParamVector pg = detail::slice_params(gnet, u.values, off);
        nn::NetGrads gg = nn::backward(gnet, pg, nullptr, tape.gen_tapes[k], dV.middleRows(row, gnet.output_size()),
                                       /*want_dx=*/true);
        du.values.segment(off, gnet.param_count()) = gg.w.values;
        dE += gg.x;
        off += gnet.param_count();
        row += gnet.output_size();
    }
    ParamVector pe = detail::slice_params(h.embed, u.values, 0);
    nn::NetGrads ge = nn::backward(h.embed, pe, nullptr, tape.embed_tape, dE);
    du.values.segment(0, h.embed.param_count()) = ge.w.values;
    return du;
}

// Arithmetic mean of the generated v over a sample set.
inline ParamVector v_average(const HyperNet& h, const BaseModel& m, const ParamVector& u, const Mat& X) {
    if (X.cols() == 0) throw UsageError("v_average: empty sample set");
    Mat V = hyper_forward_batch(h, u, X);
    return ParamVector(V.rowwise().mean(), m.trunk.adapter_layout());
}

// sum_t || varphi(u; x_t) - v ||^2 together with its gradients; the consistency
// objective tying generated particular parameters to a common target.
struct HyperFit {
    double value = 0.0;
    Vec grad_u;  // filled when requested
    Vec grad_v;  // filled when requested
};

inline HyperFit hyper_fit(const HyperNet& h, const ParamVector& u, const Mat& X, const Vec& v_target,
                          bool want_grad_u, bool want_grad_v) {
    if (X.cols() == 0) throw UsageError("hyper_fit: empty sample set");
    HyperTape tape;
    Mat V = hyper_forward_batch(h, u, X, want_grad_u ? &tape : nullptr);
    Mat R = V.colwise() - v_target;
    HyperFit out;
    out.value = R.squaredNorm();
    if (want_grad_u) out.grad_u = hyper_backward(h, u, tape, 2.0 * R).values;
    if (want_grad_v) out.grad_v = -2.0 * R.rowwise().sum();
    return out;
}

// sum_t loss(phi(w, varphi(u; x_t); x_t), y_t) and its gradient w.r.t. u:
// the task loss with hypernetwork-generated particular parameters.
struct ComposedTaskResult {
    double value = 0.0;
    Vec grad_u;
};

inline ComposedTaskResult hyper_task_loss(const BaseModel& m, const ParamVector& w, const HyperNet& h,
                                          const ParamVector& u, const nn::Batch& batch, nn::Loss kind,
                                          bool want_grad_u) {
    if (batch.count() == 0) throw UsageError("hyper_task_loss: empty batch");
    HyperTape htape;
    Mat V = hyper_forward_batch(h, u, batch.X, want_grad_u ? &htape : nullptr);
    ComposedTaskResult out;
    if (!want_grad_u) {
        Mat P = nn::forward_per_sample(m.trunk, w, batch.X, V);
        out.value = nn::loss_value(P, batch.Y, kind);
        return out;
    }
    nn::Tape btape;
    Mat P = nn::forward_per_sample(m.trunk, w, batch.X, V, &btape);
    out.value = nn::loss_value(P, batch.Y, kind);
    Mat dY = nn::loss_gradient(P, batch.Y, kind);
    nn::NetGrads bg = nn::backward_per_sample(m.trunk, w, V, btape, dY);
    out.grad_u = hyper_backward(h, u, htape, bg.v_per_sample).values;
    return out;
}

}  // namespace fsadapt::adapters
