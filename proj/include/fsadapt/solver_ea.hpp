#pragma once

#include <future>
#include <utility>
#include <vector>

#include "fsadapt/adapters.hpp"
#include "fsadapt/trace.hpp"

namespace fsadapt::ea {

// Effective Adaptation, phase 1: consensus iADMM over the shared parameter.
// Each environment keeps a local copy w_i tied to the global w through
// multipliers; the per-environment subproblems are replaced by one-step
// proximal-linear surrogates with closed-form minimizers.

struct Ea1Config {
    double sigma = 25.0;
    double rho = 25.0;
    int max_iters = 2000;
    double consensus_tol = 1e-3;  // stop once max_i ||w_i - w|| falls below
    bool second_moment = false;   // elementwise curvature scaling of the w updates
    double varpi = 0.9;           // attenuation of the cumulative squared gradient
    double epsilon = 1e-8;
    double divergence_threshold = 1e6;
    int threads = 1;
};

struct EaPhase1State {
    Vec w;
    std::vector<Vec> W;   // per-environment copies of the shared parameter
    std::vector<Vec> V;   // particular parameters
    std::vector<Vec> Pi;  // multipliers
    Vec r;                // cumulative squared gradient, starts at zero
    long iteration = 0;
};

// Per-environment gradient of (1/n) f_i at the evaluation point, plus the raw
// objective value there.
struct EnvGrad {
    Vec zeta;  // w part
    Vec xi;    // v part
    double loss = 0.0;
};

struct Ea1GradFn {
    // (zeta_i, xi_i) and f_i evaluated at (w, v_i), for every environment
    std::function<std::vector<EnvGrad>(const Vec& w, const std::vector<Vec>& V)> local_grads;
    // mean shared-parameter gradient (1/n) sum_i grad_w f_i at (w, v_i)
    std::function<Vec(const Vec& w, const std::vector<Vec>& V)> mean_w_grad;
};

// Aborted optimization carrying the partial trace for post-mortems.
struct AbortedRun : NumericError {
    std::vector<TraceRow> trace;
    AbortedRun(const std::string& what, std::vector<TraceRow> t) : NumericError(what), trace(std::move(t)) {}
};

// ---- closed-form updates ----

// Global average: w = (1/n) sum_i (w_i + pi_i / sigma).
inline Vec ea1_global_w(const std::vector<Vec>& W, const std::vector<Vec>& Pi, double sigma) {
    if (W.empty()) throw UsageError("ea1_global_w: no environments");
    Vec w = Vec::Zero(W.front().size());
    for (std::size_t i = 0; i < W.size(); ++i) w += W[i] + Pi[i] / sigma;
    return w / static_cast<double>(W.size());
}

// Local surrogate minimizer: w_i = w - (zeta + pi) / (rho + sigma),
// v_i = v - xi / rho.
inline std::pair<Vec, Vec> ea1_local(const Vec& w_next, const Vec& v, const Vec& zeta, const Vec& xi,
                                     const Vec& pi, double rho, double sigma) {
    return {w_next - (zeta + pi) / (rho + sigma), v - xi / rho};
}

// Multiplier ascent: pi += sigma (w_i - w).
inline Vec ea1_multiplier(const Vec& pi, const Vec& w_i, const Vec& w, double sigma) {
    return pi + sigma * (w_i - w);
}

// r' = varpi r + (1 - varpi) g .* g
inline Vec sm_accumulate(const Vec& r, const Vec& g, double varpi) {
    return varpi * r + (1.0 - varpi) * g.cwiseProduct(g);
}

// Scaled variants used by the second-moment extension; `scale` is the
// elementwise sqrt(r) + epsilon vector (all ones recovers the plain updates).
inline Vec ea1_global_w_scaled(const std::vector<Vec>& W, const std::vector<Vec>& Pi, double sigma,
                               const Vec& scale) {
    if (W.empty()) throw UsageError("ea1_global_w_scaled: no environments");
    Vec w = Vec::Zero(W.front().size());
    for (std::size_t i = 0; i < W.size(); ++i) w += W[i] + Pi[i].cwiseQuotient(sigma * scale);
    return w / static_cast<double>(W.size());
}

inline Vec ea1_local_w_scaled(const Vec& w_next, const Vec& zeta, const Vec& pi, double rho, double sigma,
                              const Vec& scale) {
    return w_next - (zeta + pi).cwiseQuotient((rho + sigma) * scale);
}

inline double consensus_residual(const std::vector<Vec>& W, const Vec& w) {
    double worst = 0.0;
    for (const auto& wi : W) worst = std::max(worst, (wi - w).norm());
    return worst;
}

// One plain iteration; returns the mean objective observed at (w^{l+1}, V^l).
inline double ea1_step(EaPhase1State& st, const Ea1GradFn& fn, const Ea1Config& cfg) {
    const std::size_t n = st.W.size();
    st.w = ea1_global_w(st.W, st.Pi, cfg.sigma);
    std::vector<EnvGrad> grads = fn.local_grads(st.w, st.V);
    double mean_loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        auto [wi, vi] = ea1_local(st.w, st.V[i], grads[i].zeta, grads[i].xi, st.Pi[i], cfg.rho, cfg.sigma);
        st.W[i] = std::move(wi);
        st.V[i] = std::move(vi);
        st.Pi[i] = ea1_multiplier(st.Pi[i], st.W[i], st.w, cfg.sigma);
        mean_loss += grads[i].loss;
    }
    ++st.iteration;
    return mean_loss / static_cast<double>(n);
}

// One extended iteration: accumulate the squared-gradient memory first, then
// run all update lines with the elementwise scaling in place.
inline double ea1_second_moment_step(EaPhase1State& st, const Ea1GradFn& fn, const Ea1Config& cfg) {
    const std::size_t n = st.W.size();
    const Vec g = fn.mean_w_grad(st.w, st.V);
    st.r = sm_accumulate(st.r, g, cfg.varpi);
    const Vec scale = st.r.cwiseSqrt().array() + cfg.epsilon;
    st.w = ea1_global_w_scaled(st.W, st.Pi, cfg.sigma, scale);
    std::vector<EnvGrad> grads = fn.local_grads(st.w, st.V);
    double mean_loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        st.W[i] = ea1_local_w_scaled(st.w, grads[i].zeta, st.Pi[i], cfg.rho, cfg.sigma, scale);
        st.V[i] -= grads[i].xi / cfg.rho;
        st.Pi[i] = ea1_multiplier(st.Pi[i], st.W[i], st.w, cfg.sigma);
        mean_loss += grads[i].loss;
    }
    ++st.iteration;
    return mean_loss / static_cast<double>(n);
}

// ---- model-backed gradient plumbing ----

// Splits environment gradient evaluations across up to `threads` workers;
// results land in fixed slots so reductions stay deterministic.
template <typename F>
inline void parallel_envs(std::size_t n, int threads, F&& body) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(threads, n);
    std::vector<std::future<void>> futs;
    for (std::size_t wkr = 0; wkr < workers; ++wkr) {
        futs.push_back(std::async(std::launch::async, [&, wkr] {
            for (std::size_t i = wkr; i < n; i += workers) body(i);
        }));
    }
    for (auto& f : futs) f.get();
}

inline Ea1GradFn make_phase1_gradfn(adapters::BaseModel model, std::vector<nn::Batch> datasets, nn::Loss kind,
                                    const Ea1Config& cfg) {
    const std::size_t n = datasets.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    auto shared_model = std::make_shared<adapters::BaseModel>(std::move(model));
    auto shared_data = std::make_shared<std::vector<nn::Batch>>(std::move(datasets));
    Ea1GradFn fn;
    fn.local_grads = [shared_model, shared_data, kind, inv_n, n, threads = cfg.threads](
                         const Vec& w, const std::vector<Vec>& V) {
        std::vector<EnvGrad> out(n);
        ParamVector wp(w, shared_model->trunk.layout());
        parallel_envs(n, threads, [&](std::size_t i) {
            ParamVector vp(V[i], shared_model->trunk.adapter_layout());
            nn::Tape tape;
            Mat P = nn::forward(shared_model->trunk, wp, (*shared_data)[i].X, &vp, &tape);
            const double value = nn::loss_value(P, (*shared_data)[i].Y, kind);
            Mat dY = nn::loss_gradient(P, (*shared_data)[i].Y, kind);
            nn::NetGrads g = nn::backward(shared_model->trunk, wp, &vp, tape, dY);
            out[i] = EnvGrad{inv_n * g.w.values, inv_n * g.v.values, value};
        });
        return out;
    };
    fn.mean_w_grad = [shared_model, shared_data, kind, inv_n, n, threads = cfg.threads](
                         const Vec& w, const std::vector<Vec>& V) {
        std::vector<Vec> parts(n);
        ParamVector wp(w, shared_model->trunk.layout());
        parallel_envs(n, threads, [&](std::size_t i) {
            ParamVector vp(V[i], shared_model->trunk.adapter_layout());
            nn::NetGrads g = nn::grad(shared_model->trunk, wp, (*shared_data)[i], kind, &vp);
            parts[i] = std::move(g.w.values);
        });
        Vec g = Vec::Zero(w.size());
        for (const auto& p : parts) g += p;
        return Vec(inv_n * g);
    };
    return fn;
}

inline EaPhase1State ea1_init(const adapters::BaseModel& model, std::size_t n, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0xea1));
    EaPhase1State st;
    st.w = nn::init_params(model.trunk, rng).values;
    st.W.assign(n, st.w);
    st.V.assign(n, model.identity_v().values);
    st.Pi.assign(n, Vec::Zero(st.w.size()));
    st.r = Vec::Zero(st.w.size());
    return st;
}

struct Ea1Result {
    EaPhase1State state;
    long iterations = 0;
    double final_loss = 0.0;      // mean objective at the returned iterate
    double final_residual = 0.0;  // max_i ||w_i - w||
};

// Runs phase 1 until the iteration budget or the consensus threshold,
// whichever comes first. Streams (iteration, mean loss, consensus residual).
inline Ea1Result ea1_run(const adapters::BaseModel& model, const std::vector<nn::Batch>& datasets, nn::Loss kind,
                         EaPhase1State st, const Ea1Config& cfg, const TraceSink& sink = nullptr) {
    if (datasets.empty()) throw UsageError("ea1_run: need at least one environment");
    Ea1GradFn fn = make_phase1_gradfn(model, datasets, kind, cfg);
    std::vector<TraceRow> trace;
    double residual = 0.0;
    for (int it = 0; it < cfg.max_iters; ++it) {
        double loss;
        try {
            loss = cfg.second_moment ? ea1_second_moment_step(st, fn, cfg) : ea1_step(st, fn, cfg);
        } catch (const NumericError& e) {
            throw AbortedRun("ea1_run: " + std::string(e.what()), std::move(trace));
        }
        residual = consensus_residual(st.W, st.w);
        TraceRow row{st.iteration, loss, residual};
        trace.push_back(row);
        if (sink) sink(row);
        if (!std::isfinite(loss) || loss > cfg.divergence_threshold)
            throw AbortedRun("ea1_run: diverged at iteration " + std::to_string(st.iteration) + " (mean loss " +
                                 std::to_string(loss) + ")",
                             std::move(trace));
        if (residual < cfg.consensus_tol) break;
    }
    Ea1Result out;
    out.iterations = st.iteration;
    out.final_residual = residual;
    double total = 0.0;
    for (std::size_t i = 0; i < datasets.size(); ++i) {
        ParamVector wp(st.w, model.trunk.layout());
        ParamVector vp(st.V[i], model.trunk.adapter_layout());
        total += nn::loss_eval(model.trunk, wp, {datasets[i].X, datasets[i].Y}, kind, &vp);
    }
    out.final_loss = total / static_cast<double>(datasets.size());
    out.state = std::move(st);
    return out;
}

// Effective Adaptation, phase 2: consensus iADMM over the hyper-weights u with
// the new environment's particular parameter v_n learned jointly. Reuses all
// previous environments' inputs.

struct Ea2Config {
    double eta = 50.0;
    double gamma = 50.0;
    double mu = 50.0;
    double lambda = 1.0;
    int max_iters = 300;
    double consensus_tol = 1e-4;  // on max_i ||u_i - u||
    double divergence_threshold = 1e7;
    int threads = 1;
};

struct EaPhase2State {
    Vec u;
    std::vector<Vec> U;
    std::vector<Vec> Z;
    Vec v_n;
    long iteration = 0;
};

// v step of the phase-2 scheme: v' = v - xi / eta.
inline Vec ea2_v_step(const Vec& v, const Vec& xi_n, double eta) { return v - xi_n / eta; }

// u_i step: u_i = u - (zeta_i + z_i) / (gamma + mu).
inline Vec ea2_u_local(const Vec& u_next, const Vec& zeta_i, const Vec& z_i, double gamma, double mu) {
    return u_next - (zeta_i + z_i) / (gamma + mu);
}

struct Ea2Problem {
    const adapters::BaseModel* model = nullptr;
    const adapters::HyperNet* hyper = nullptr;
    const ParamVector* w_star = nullptr;     // frozen shared weights
    const std::vector<Vec>* v_star = nullptr;  // learned particular parameters
    const std::vector<Mat>* env_inputs = nullptr;  // x samples per previous environment
    nn::Batch few_shot;                            // D_n
    nn::Loss kind = nn::Loss::bce;
};

struct Ea2StepInfo {
    double objective = 0.0;  // phase-2 objective at the fresh iterate
    double residual = 0.0;   // max_i ||u_i - u||
};

// One full iteration of the phase-2 scheme (global u average, v_n descent
// step, all local u_i steps, all multiplier steps).
inline Ea2StepInfo ea2_updates(EaPhase2State& st, const Ea2Problem& pb, const Ea2Config& cfg) {
    const std::size_t n = st.U.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    st.u = ea1_global_w(st.U, st.Z, cfg.mu);
    ParamVector u_next(st.u, pb.hyper->layout());

    // xi_n = sum_i grad_v h_i(u^{l+1}, v_n) collapses to
    // grad_v f_n^varphi + lambda grad_v f_n^phi.
    adapters::HyperFit fs_fit = adapters::hyper_fit(*pb.hyper, u_next, pb.few_shot.X, st.v_n, false, true);
    ParamVector vp(st.v_n, pb.model->trunk.adapter_layout());
    nn::NetGrads task = nn::grad(pb.model->trunk, *pb.w_star, pb.few_shot, pb.kind, &vp);
    const Vec xi_n = fs_fit.grad_v + cfg.lambda * task.v.values;
    st.v_n = ea2_v_step(st.v_n, xi_n, cfg.eta);

    // zeta_i = (1/n)(grad_u f_i^varphi(u^{l+1}, v_i*) + grad_u f_n^varphi(u^{l+1}, v_n^{l+1}))
    adapters::HyperFit fs_after =
        adapters::hyper_fit(*pb.hyper, u_next, pb.few_shot.X, st.v_n, true, false);
    std::vector<Vec> env_grad_u(n);
    std::vector<double> env_value(n);
    parallel_envs(n, cfg.threads, [&](std::size_t i) {
        adapters::HyperFit fit =
            adapters::hyper_fit(*pb.hyper, u_next, (*pb.env_inputs)[i], (*pb.v_star)[i], true, false);
        env_grad_u[i] = std::move(fit.grad_u);
        env_value[i] = fit.value;
    });
    double residual = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const Vec zeta_i = inv_n * (env_grad_u[i] + fs_after.grad_u);
        st.U[i] = ea2_u_local(st.u, zeta_i, st.Z[i], cfg.gamma, cfg.mu);
        st.Z[i] = ea1_multiplier(st.Z[i], st.U[i], st.u, cfg.mu);
        residual = std::max(residual, (st.U[i] - st.u).norm());
    }
    ++st.iteration;

    ParamVector vp_next(st.v_n, pb.model->trunk.adapter_layout());
    const double task_after = nn::loss_eval(pb.model->trunk, *pb.w_star, pb.few_shot, pb.kind, &vp_next);
    double obj = fs_after.value + cfg.lambda * task_after;
    for (std::size_t i = 0; i < n; ++i) obj += inv_n * env_value[i];
    return Ea2StepInfo{obj, residual};
}

inline EaPhase2State ea2_init(const adapters::HyperNet& hyper, const std::vector<Vec>& v_star,
                              std::uint64_t seed) {
    if (v_star.empty()) throw UsageError("ea2_init: need phase-1 particular parameters");
    Rng rng(derive_seed(seed, 0xea2));
    EaPhase2State st;
    st.u = adapters::init_hyper_params(hyper, rng).values;
    st.U.assign(v_star.size(), st.u);
    st.Z.assign(v_star.size(), Vec::Zero(st.u.size()));
    Vec mean = Vec::Zero(v_star.front().size());
    for (const auto& v : v_star) mean += v;
    st.v_n = mean / static_cast<double>(v_star.size());
    return st;
}

struct Ea2Result {
    EaPhase2State state;
    long iterations = 0;
    double final_objective = 0.0;
};

inline Ea2Result ea2_run(const Ea2Problem& pb, EaPhase2State st, const Ea2Config& cfg,
                         const TraceSink& sink = nullptr) {
    if (pb.few_shot.count() == 0) throw UsageError("ea2_run: empty few-shot set");
    std::vector<TraceRow> trace;
    Ea2StepInfo info;
    for (int it = 0; it < cfg.max_iters; ++it) {
        try {
            info = ea2_updates(st, pb, cfg);
        } catch (const NumericError& e) {
            throw AbortedRun("ea2_run: " + std::string(e.what()), std::move(trace));
        }
        TraceRow row{st.iteration, info.objective, info.residual};
        trace.push_back(row);
        if (sink) sink(row);
        if (!std::isfinite(info.objective) || info.objective > cfg.divergence_threshold)
            throw AbortedRun("ea2_run: diverged at iteration " + std::to_string(st.iteration),
                             std::move(trace));
        if (info.residual < cfg.consensus_tol) break;
    }
    Ea2Result out;
    out.iterations = st.iteration;
    out.final_objective = info.objective;
    out.state = std::move(st);
    return out;
}

// Prediction with the adapted particular parameter.
inline Vec ea_predict(const adapters::BaseModel& model, const ParamVector& w_star, const ParamVector& v_n,
                      const Vec& x) {
    return adapters::base_forward(model, w_star, v_n, x);
}

}  // namespace fsadapt::ea
