#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fsadapt/param_vector.hpp"

namespace fsadapt::nn {

// Activations are restricted to twice continuously differentiable choices;
// the online-adaptation convergence monitor relies on that smoothness.
enum class Activation { identity, tanh_fn, sigmoid };

enum class LayerKind { dense, conv1d };

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    Activation act = Activation::identity;
    // dense
    int in = 0;
    int out = 0;
    // conv1d (stride 1, zero-padded to constant length, odd kernel)
    int in_ch = 0;
    int out_ch = 0;
    int kernel = 0;
    int length = 0;
    // Channel-level scale/shift values attach here when true.
    bool adapter = false;

    int input_size() const { return kind == LayerKind::dense ? in : in_ch * length; }
    int output_size() const { return kind == LayerKind::dense ? out : out_ch * length; }
    int channels() const { return kind == LayerKind::dense ? out : out_ch; }
    int weight_rows() const { return kind == LayerKind::dense ? out : out_ch; }
    int weight_cols() const { return kind == LayerKind::dense ? in : in_ch * kernel; }
    std::size_t weight_count() const {
        return static_cast<std::size_t>(weight_rows()) * static_cast<std::size_t>(weight_cols());
    }
    std::size_t param_count() const { return weight_count() + static_cast<std::size_t>(weight_rows()); }
};

inline LayerSpec dense(int in, int out, Activation act, bool adapter = false) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.in = in;
    s.out = out;
    s.act = act;
    s.adapter = adapter;
    return s;
}

inline LayerSpec conv1d(int in_ch, int out_ch, int kernel, int length, Activation act, bool adapter = false) {
    LayerSpec s;
    s.kind = LayerKind::conv1d;
    s.in_ch = in_ch;
    s.out_ch = out_ch;
    s.kernel = kernel;
    s.length = length;
    s.act = act;
    s.adapter = adapter;
    return s;
}

struct Network {
    std::vector<LayerSpec> layers;

    int input_size() const { return layers.empty() ? 0 : layers.front().input_size(); }
    int output_size() const { return layers.empty() ? 0 : layers.back().output_size(); }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& l : layers) n += l.param_count();
        return n;
    }

    // Total count of scale/shift values across adapter layers (the v vector).
    std::size_t adapter_value_count() const {
        std::size_t n = 0;
        for (const auto& l : layers)
            if (l.adapter) n += 2 * static_cast<std::size_t>(l.channels());
        return n;
    }

    std::vector<std::size_t> adapter_layers() const {
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].adapter) idx.push_back(i);
        return idx;
    }

    std::vector<Segment> layout() const {
        std::vector<Segment> segs;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            const std::string base = "layer" + std::to_string(i);
            segs.push_back({base + ".W", static_cast<std::size_t>(l.weight_rows()),
                            static_cast<std::size_t>(l.weight_cols())});
            segs.push_back({base + ".b", static_cast<std::size_t>(l.weight_rows()), 1});
        }
        return segs;
    }

    std::vector<Segment> adapter_layout() const {
        std::vector<Segment> segs;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (!l.adapter) continue;
            const std::string base = "layer" + std::to_string(i);
            segs.push_back({base + ".alpha", static_cast<std::size_t>(l.channels()), 1});
            segs.push_back({base + ".beta", static_cast<std::size_t>(l.channels()), 1});
        }
        return segs;
    }

    void validate() const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& l = layers[i];
            if (l.input_size() <= 0 || l.output_size() <= 0)
                throw ConfigError("layer " + std::to_string(i) + ": non-positive width");
            if (l.kind == LayerKind::conv1d && (l.kernel <= 0 || l.kernel % 2 == 0))
                throw ConfigError("layer " + std::to_string(i) + ": conv kernel must be odd and positive");
            if (i + 1 < layers.size() && l.output_size() != layers[i + 1].input_size())
                throw ConfigError("layer " + std::to_string(i) + ": output size " +
                                  std::to_string(l.output_size()) + " does not match layer " +
                                  std::to_string(i + 1) + " input size " +
                                  std::to_string(layers[i + 1].input_size()));
        }
    }
};

inline void apply_activation(Activation act, Mat& z) {
    switch (act) {
        case Activation::identity: break;
        case Activation::tanh_fn: z = z.array().tanh().matrix(); break;
        case Activation::sigmoid: z = (1.0 / (1.0 + (-z.array()).exp())).matrix(); break;
    }
}

// Derivative from the activated value (tanh' = 1-a^2, sigmoid' = a(1-a)).
inline Mat activation_deriv_from_output(Activation act, const Mat& a) {
    switch (act) {
        case Activation::identity: return Mat::Ones(a.rows(), a.cols());
        case Activation::tanh_fn: return (1.0 - a.array().square()).matrix();
        case Activation::sigmoid: return (a.array() * (1.0 - a.array())).matrix();
    }
    return Mat();
}

struct Tape {
    std::vector<Mat> acts;       // acts[0] = input batch, acts[l+1] = layer l output
    std::vector<Mat> pre_scale;  // adapter layers: W*x before channel scaling
    std::vector<Mat> cols;       // conv layers: im2col buffer
};

namespace detail {

inline Eigen::Map<const Mat> weight_of(const LayerSpec& l, const Vec& params, std::size_t offset) {
    return Eigen::Map<const Mat>(params.data() + offset, l.weight_rows(), l.weight_cols());
}

inline Eigen::Map<const Vec> bias_of(const LayerSpec& l, const Vec& params, std::size_t offset) {
    return Eigen::Map<const Vec>(params.data() + offset + l.weight_count(), l.weight_rows());
}

inline std::size_t param_offset(const Network& net, std::size_t layer) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < layer; ++i) off += net.layers[i].param_count();
    return off;
}

// im2col, transposed layout: row (b*len + t) of column (ci*k + dk) holds the
// input sample feeding output position t. Each (b, ci, dk) block is one
// contiguous segment copy.
inline Mat im2col(const LayerSpec& l, const Mat& X) {
    const int len = l.length, k = l.kernel, in_ch = l.in_ch, pad = l.kernel / 2;
    const Eigen::Index B = X.cols();
    Mat cols = Mat::Zero(static_cast<Eigen::Index>(len) * B, static_cast<Eigen::Index>(in_ch) * k);
    for (int ci = 0; ci < in_ch; ++ci) {
        for (int dk = 0; dk < k; ++dk) {
            const int shift = dk - pad;  // source index is t + shift
            const int t0 = std::max(0, -shift);
            const int t1 = len - std::max(0, shift);
            if (t1 <= t0) continue;
            auto dst = cols.col(ci * k + dk);
            for (Eigen::Index b = 0; b < B; ++b)
                dst.segment(b * len + t0, t1 - t0) = X.col(b).segment(ci * len + t0 + shift, t1 - t0);
        }
    }
    return cols;
}

inline void col2im_add(const LayerSpec& l, const Mat& dcols, Mat& dX) {
    const int len = l.length, k = l.kernel, in_ch = l.in_ch, pad = l.kernel / 2;
    const Eigen::Index B = dX.cols();
    for (int ci = 0; ci < in_ch; ++ci) {
        for (int dk = 0; dk < k; ++dk) {
            const int shift = dk - pad;
            const int t0 = std::max(0, -shift);
            const int t1 = len - std::max(0, shift);
            if (t1 <= t0) continue;
            auto src = dcols.col(ci * k + dk);
            for (Eigen::Index b = 0; b < B; ++b)
                dX.col(b).segment(ci * len + t0 + shift, t1 - t0) += src.segment(b * len + t0, t1 - t0);
        }
    }
}

// (len*B) x out_ch <-> (out_ch*len) x B, contiguous runs of `len`
inline Mat fold_channels(const Mat& zt, int out_ch, int len, Eigen::Index B) {
    Mat z(static_cast<Eigen::Index>(out_ch) * len, B);
    for (Eigen::Index b = 0; b < B; ++b)
        for (int co = 0; co < out_ch; ++co)
            z.col(b).segment(co * len, len) = zt.col(co).segment(b * len, len);
    return z;
}

inline Mat unfold_channels(const Mat& z, int out_ch, int len) {
    const Eigen::Index B = z.cols();
    Mat zt(static_cast<Eigen::Index>(len) * B, out_ch);
    for (Eigen::Index b = 0; b < B; ++b)
        for (int co = 0; co < out_ch; ++co)
            zt.col(co).segment(b * len, len) = z.col(b).segment(co * len, len);
    return zt;
}

// Adapter values for a pass: either one shared vector or one column per sample.
struct AdapterView {
    const Vec* shared = nullptr;
    const Mat* per_sample = nullptr;

    bool present() const { return shared != nullptr || per_sample != nullptr; }
    double alpha(std::size_t voff, int c, Eigen::Index b) const {
        return shared ? (*shared)(static_cast<Eigen::Index>(voff) + c) : (*per_sample)(static_cast<Eigen::Index>(voff) + c, b);
    }
};

inline Mat forward_impl(const Network& net, const ParamVector& params, const Mat& X, const AdapterView& av,
                        Tape* tape) {
    net.validate();
    if (params.size() != net.param_count())
        throw ConfigError("forward: parameter vector size " + std::to_string(params.size()) +
                          " does not match network parameter count " + std::to_string(net.param_count()));
    if (X.rows() != net.input_size())
        throw ConfigError("forward: input rows " + std::to_string(X.rows()) +
                          " do not match network input size " + std::to_string(net.input_size()));
    const std::size_t vsize = net.adapter_value_count();
    if (vsize > 0) {
        if (!av.present()) throw ConfigError("forward: adapter values of size " + std::to_string(vsize) + " required");
        const std::size_t got = av.shared ? static_cast<std::size_t>(av.shared->size())
                                          : static_cast<std::size_t>(av.per_sample->rows());
        if (got != vsize)
            throw ConfigError("forward: adapter values have size " + std::to_string(got) + ", expected " +
                              std::to_string(vsize));
        if (av.per_sample && av.per_sample->cols() != X.cols())
            throw ConfigError("forward: per-sample adapter values must have one column per sample");
    } else if ((av.shared && av.shared->size() != 0) || (av.per_sample && av.per_sample->rows() != 0)) {
        throw ConfigError("forward: network has no adapter layers but adapter values were given");
    }

    if (tape) {
        tape->acts.assign(1, X);
        tape->pre_scale.assign(net.layers.size(), Mat());
        tape->cols.assign(net.layers.size(), Mat());
    }

    const Eigen::Index B = X.cols();
    Mat a = X;
    std::size_t off = 0, voff = 0;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const auto& l = net.layers[li];
        const auto W = weight_of(l, params.values, off);
        const auto b = bias_of(l, params.values, off);
        const int ch = l.channels();
        Mat p;
        if (l.kind == LayerKind::dense) {
            p = W * a;
        } else {
            Mat cols = im2col(l, a);
            Mat pt;
            pt.noalias() = cols * W.transpose();  // (len*B) x out_ch
            p = fold_channels(pt, l.out_ch, l.length, B);
            if (tape) tape->cols[li] = std::move(cols);
        }
        const int len = (l.kind == LayerKind::dense) ? 1 : l.length;
        Mat z;
        if (l.adapter) {
            if (tape) tape->pre_scale[li] = p;
            z.resizeLike(p);
            if (av.shared) {
                for (int c = 0; c < ch; ++c) {
                    const double alpha = (*av.shared)(static_cast<Eigen::Index>(voff) + c);
                    const double shift = b(c) + (*av.shared)(static_cast<Eigen::Index>(voff) + ch + c);
                    z.middleRows(c * len, len) = (alpha * p.middleRows(c * len, len).array() + shift).matrix();
                }
            } else {
                for (int c = 0; c < ch; ++c) {
                    const auto alpha_row = av.per_sample->row(static_cast<Eigen::Index>(voff) + c);
                    const auto beta_row = av.per_sample->row(static_cast<Eigen::Index>(voff) + ch + c);
                    z.middleRows(c * len, len) =
                        (p.middleRows(c * len, len).array().rowwise() * alpha_row.array()).rowwise() +
                        (beta_row.array() + b(c));
                }
            }
        } else {
            z = std::move(p);
            for (int c = 0; c < ch; ++c) z.middleRows(c * len, len).array() += b(c);
        }
        apply_activation(l.act, z);
        if (!z.allFinite()) throw NumericError("non-finite activation at layer " + std::to_string(li));
        a = std::move(z);
        if (tape) tape->acts.push_back(a);
        off += l.param_count();
        if (l.adapter) voff += 2 * static_cast<std::size_t>(ch);
    }
    return a;
}

}  // namespace detail

// Forward pass over a batch (columns are samples). `v` supplies the channel
// scale/shift values for adapter layers in trunk order (alpha_k then beta_k
// per layer); it must be null exactly when the network has no adapter layers.
inline Mat forward(const Network& net, const ParamVector& params, const Mat& X,
                   const ParamVector* v = nullptr, Tape* tape = nullptr) {
    detail::AdapterView av;
    if (v) av.shared = &v->values;
    return detail::forward_impl(net, params, X, av, tape);
}

// Variant with one adapter-value column per sample (hypernetwork-generated v).
inline Mat forward_per_sample(const Network& net, const ParamVector& params, const Mat& X, const Mat& V,
                              Tape* tape = nullptr) {
    detail::AdapterView av;
    av.per_sample = &V;
    return detail::forward_impl(net, params, X, av, tape);
}

struct NetGrads {
    ParamVector w;     // same layout as the network parameters
    ParamVector v;     // alpha/beta layout; zero-sized when no adapter layers
    Mat v_per_sample;  // per-sample adapter gradients (per-sample passes only)
    Mat x;             // gradient w.r.t. the input batch (when requested)
};

namespace detail {

inline NetGrads backward_impl(const Network& net, const ParamVector& params, const AdapterView& av,
                              const Tape& tape, const Mat& dY, bool want_dx) {
    NetGrads g;
    g.w = ParamVector(net.layout());
    g.v = ParamVector(net.adapter_layout());
    const Eigen::Index B = dY.cols();
    if (av.per_sample) g.v_per_sample = Mat::Zero(av.per_sample->rows(), B);

    std::vector<std::size_t> voffs(net.layers.size(), 0);
    std::size_t vo = 0;
    for (std::size_t i = 0; i < net.layers.size(); ++i) {
        voffs[i] = vo;
        if (net.layers[i].adapter) vo += 2 * static_cast<std::size_t>(net.layers[i].channels());
    }

    Mat da = dY;
    for (std::size_t li_plus = net.layers.size(); li_plus > 0; --li_plus) {
        const std::size_t li = li_plus - 1;
        const auto& l = net.layers[li];
        const std::size_t off = param_offset(net, li);
        const auto W = weight_of(l, params.values, off);
        const Mat& a_out = tape.acts[li + 1];
        const Mat& a_in = tape.acts[li];
        const int ch = l.channels();
        const int len = (l.kind == LayerKind::dense) ? 1 : l.length;

        Mat dz = da.cwiseProduct(activation_deriv_from_output(l.act, a_out));
        if (!dz.allFinite()) throw NumericError("non-finite gradient at layer " + std::to_string(li));

        auto wseg = g.w.values.segment(off, l.weight_count());
        auto bseg = g.w.values.segment(off + l.weight_count(), l.weight_rows());
        Eigen::Map<Mat> dW(wseg.data(), l.weight_rows(), l.weight_cols());

        Mat dzs = dz;  // alpha-scaled cotangent feeding the weights and the input
        if (l.adapter) {
            const std::size_t voff = voffs[li];
            const Mat& p = tape.pre_scale[li];
            for (int c = 0; c < ch; ++c) {
                const auto dzb = dz.middleRows(c * len, len);
                const auto pb = p.middleRows(c * len, len);
                if (av.shared) {
                    g.v.values(static_cast<Eigen::Index>(voff) + c) += dzb.cwiseProduct(pb).sum();
                    g.v.values(static_cast<Eigen::Index>(voff) + ch + c) += dzb.sum();
                    dzs.middleRows(c * len, len) *= (*av.shared)(static_cast<Eigen::Index>(voff) + c);
                } else {
                    g.v_per_sample.row(static_cast<Eigen::Index>(voff) + c) +=
                        dzb.cwiseProduct(pb).colwise().sum();
                    g.v_per_sample.row(static_cast<Eigen::Index>(voff) + ch + c) += dzb.colwise().sum();
                    dzs.middleRows(c * len, len) =
                        (dzb.array().rowwise() * av.per_sample->row(static_cast<Eigen::Index>(voff) + c).array())
                            .matrix();
                }
            }
        }

        if (l.kind == LayerKind::dense) {
            dW += dzs * a_in.transpose();
            bseg += dz.rowwise().sum();
            if (li > 0 || want_dx) da = W.transpose() * dzs;
        } else {
            Mat dzs_t = unfold_channels(dzs, l.out_ch, l.length);  // (len*B) x out_ch
            dW.noalias() += dzs_t.transpose() * tape.cols[li];
            for (int c = 0; c < ch; ++c) bseg(c) += dz.middleRows(c * len, len).sum();
            if (li > 0 || want_dx) {
                Mat dcols;
                dcols.noalias() = dzs_t * W;  // (len*B) x (in_ch*k)
                Mat dx = Mat::Zero(a_in.rows(), a_in.cols());
                col2im_add(l, dcols, dx);
                da = std::move(dx);
            }
        }
    }
    if (want_dx) g.x = std::move(da);
    return g;
}

}  // namespace detail

// Reverse pass. `dY` is the loss gradient w.r.t. the network output batch.
inline NetGrads backward(const Network& net, const ParamVector& params, const ParamVector* v,
                         const Tape& tape, const Mat& dY, bool want_dx = false) {
    detail::AdapterView av;
    if (v) av.shared = &v->values;
    return detail::backward_impl(net, params, av, tape, dY, want_dx);
}

inline NetGrads backward_per_sample(const Network& net, const ParamVector& params, const Mat& V,
                                    const Tape& tape, const Mat& dY, bool want_dx = false) {
    detail::AdapterView av;
    av.per_sample = &V;
    return detail::backward_impl(net, params, av, tape, dY, want_dx);
}

enum class Loss { bce, mse };

constexpr double kBceClamp = 1e-7;

// Sum of the per-sample losses over the batch (columns are samples).
inline double loss_value(const Mat& P, const Mat& Y, Loss kind) {
    if (P.rows() != Y.rows() || P.cols() != Y.cols())
        throw ConfigError("loss: prediction and label shapes differ");
    if (kind == Loss::mse) return (P - Y).squaredNorm();
    double total = 0.0;
    for (Eigen::Index j = 0; j < P.cols(); ++j) {
        for (Eigen::Index i = 0; i < P.rows(); ++i) {
            const double p = P(i, j);
            if (!(p >= -1e-12 && p <= 1.0 + 1e-12))
                throw NumericError("bce: prediction " + std::to_string(p) + " outside (0,1)");
            const double pc = std::clamp(p, kBceClamp, 1.0 - kBceClamp);
            const double y = Y(i, j);
            total -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
        }
    }
    return total;
}

inline Mat loss_gradient(const Mat& P, const Mat& Y, Loss kind) {
    if (kind == Loss::mse) return 2.0 * (P - Y);
    Mat G(P.rows(), P.cols());
    for (Eigen::Index j = 0; j < P.cols(); ++j) {
        for (Eigen::Index i = 0; i < P.rows(); ++i) {
            const double p = P(i, j);
            if (!(p >= -1e-12 && p <= 1.0 + 1e-12))
                throw NumericError("bce: prediction " + std::to_string(p) + " outside (0,1)");
            const double pc = std::clamp(p, kBceClamp, 1.0 - kBceClamp);
            G(i, j) = (pc - Y(i, j)) / (pc * (1.0 - pc));
        }
    }
    return G;
}

struct Batch {
    Mat X;  // input_size x count
    Mat Y;  // output_size x count
    Eigen::Index count() const { return X.cols(); }
};

inline double loss_eval(const Network& net, const ParamVector& params, const Batch& batch, Loss kind,
                        const ParamVector* v = nullptr) {
    if (batch.count() == 0) throw UsageError("loss_eval: empty batch");
    return loss_value(forward(net, params, batch.X, v), batch.Y, kind);
}

// Total gradient of the summed loss over the batch, same layout as `params`
// (plus the adapter-value gradient when the network carries adapters).
inline NetGrads grad(const Network& net, const ParamVector& params, const Batch& batch, Loss kind,
                     const ParamVector* v = nullptr, bool want_dx = false) {
    if (batch.count() == 0) throw UsageError("grad: empty batch");
    Tape tape;
    Mat P = forward(net, params, batch.X, v, &tape);
    Mat dY = loss_gradient(P, batch.Y, kind);
    return backward(net, params, v, tape, dY, want_dx);
}

// Central finite differences of an arbitrary scalar function; the oracle used
// to cross-check every analytic gradient in this library.
inline Vec finite_diff_fn(const std::function<double(const Vec&)>& f, const Vec& x0, double step) {
    if (!(step > 0)) throw UsageError("finite_diff: step must be positive");
    Vec g(x0.size());
    Vec x = x0;
    for (Eigen::Index i = 0; i < x0.size(); ++i) {
        const double orig = x(i);
        x(i) = orig + step;
        const double fp = f(x);
        x(i) = orig - step;
        const double fm = f(x);
        x(i) = orig;
        g(i) = (fp - fm) / (2.0 * step);
    }
    return g;
}

inline ParamVector finite_diff(const Network& net, const ParamVector& params, const Batch& batch, Loss kind,
                               double step, const ParamVector* v = nullptr) {
    auto f = [&](const Vec& x) {
        ParamVector p(x, params.layout);
        return loss_eval(net, p, batch, kind, v);
    };
    ParamVector g = zeros_like(params);
    g.values = finite_diff_fn(f, params.values, step);
    return g;
}

// Glorot-uniform weights, zero biases.
inline ParamVector init_params(const Network& net, Rng& rng) {
    ParamVector p(net.layout());
    std::size_t off = 0;
    for (const auto& l : net.layers) {
        int fan_in, fan_out;
        if (l.kind == LayerKind::dense) {
            fan_in = l.in;
            fan_out = l.out;
        } else {
            fan_in = l.in_ch * l.kernel;
            fan_out = l.out_ch * l.kernel;
        }
        const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
        for (std::size_t i = 0; i < l.weight_count(); ++i)
            p.values(static_cast<Eigen::Index>(off + i)) = rng.uniform(-a, a);
        off += l.param_count();  // biases stay zero
    }
    return p;
}

}  // namespace fsadapt::nn
