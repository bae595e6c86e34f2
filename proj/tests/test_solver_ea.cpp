#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "fsadapt/env_ofdm.hpp"
#include "fsadapt/solver_ea.hpp"
#include "oracle_helpers.hpp"

using namespace fsadapt;
using adapters::BaseModel;
using adapters::HyperNet;
using nn::Activation;
using nn::Loss;
using test::numeric_argmin;
using test::random_vec;

namespace {

// Adapter-free linear regression model: one dense identity layer.
BaseModel linear_model(int in, int out) {
    return BaseModel::from_trunk(nn::Network{{nn::dense(in, out, Activation::identity)}});
}

nn::Batch linear_batch(Rng& rng, int in, int out, int count) {
    Mat A = Mat::NullaryExpr(out, in, [&] { return rng.normal(); });
    nn::Batch b;
    b.X = Mat::NullaryExpr(in, count, [&] { return rng.normal(); });
    b.Y = A * b.X + 0.05 * Mat::NullaryExpr(out, count, [&] { return rng.normal(); });
    return b;
}

// Tiny 4-environment OFDM problem for consensus checks.
struct MiniOfdm {
    BaseModel model;
    std::vector<nn::Batch> data;
};

MiniOfdm mini_ofdm(std::uint64_t seed, int k_sub = 8, int d_i = 16, int width = 4) {
    MiniOfdm out;
    nn::Network trunk{{nn::conv1d(4, width, 3, k_sub, Activation::tanh_fn),
                       nn::conv1d(width, width, 3, k_sub, Activation::tanh_fn, /*adapter=*/true),
                       nn::conv1d(width, 1, 3, k_sub, Activation::sigmoid)}};
    out.model = BaseModel::from_trunk(trunk);
    for (std::uint64_t i = 0; i < 4; ++i) {
        ofdm::Pdp pdp = ofdm::sample_environment(derive_seed(seed, i), 3);
        EnvironmentDataset ds = ofdm::make_dataset(pdp, d_i, 10.0, k_sub, 2, derive_seed(seed, 100 + i));
        out.data.push_back(ds.batch());
    }
    return out;
}

}  // namespace

TEST(Ea1GlobalW, ZeroMultipliersGiveMean) {
    Vec w0(2), w1(2);
    w0 << 1, 1;
    w1 << 3, 3;
    std::vector<Vec> W{w0, w1};
    std::vector<Vec> Pi{Vec::Zero(2), Vec::Zero(2)};
    Vec w = ea::ea1_global_w(W, Pi, 25.0);
    EXPECT_DOUBLE_EQ(w(0), 2.0);
    EXPECT_DOUBLE_EQ(w(1), 2.0);
}

TEST(Ea1GlobalW, DirectSubstitution) {
    std::vector<Vec> W{Vec::Constant(1, 1.0)};
    std::vector<Vec> Pi{Vec::Constant(1, 25.0)};
    Vec w = ea::ea1_global_w(W, Pi, 25.0);
    EXPECT_DOUBLE_EQ(w(0), 2.0);
}

// Oracle: numeric argmin of the augmented Lagrangian's w-dependent part.
TEST(Ea1GlobalW, MatchesNumericArgminOfLagrangian) {
    Rng rng(404);
    const int dim = 5, n = 3;
    const double sigma = 7.0;
    std::vector<Vec> W, Pi;
    for (int i = 0; i < n; ++i) {
        W.push_back(random_vec(rng, dim));
        Pi.push_back(random_vec(rng, dim));
    }
    auto lagrangian_w = [&](const Vec& w) {
        double acc = 0.0;
        for (int i = 0; i < n; ++i) acc += Pi[i].dot(W[i] - w) + 0.5 * sigma * (W[i] - w).squaredNorm();
        return acc;
    };
    Vec numeric = numeric_argmin(lagrangian_w, Vec::Zero(dim));
    Vec closed = ea::ea1_global_w(W, Pi, sigma);
    EXPECT_LT((numeric - closed).norm(), 1e-8);
}

TEST(Ea1Local, FixedPointWhenGradientsAndMultipliersVanish) {
    Vec w_next = random_vec(*(new Rng(1)), 4);
    Vec v(3);
    v << 1, 2, 3;
    auto [wi, vi] = ea::ea1_local(w_next, v, Vec::Zero(4), Vec::Zero(3), Vec::Zero(4), 25.0, 25.0);
    EXPECT_TRUE(wi == w_next);
    EXPECT_TRUE(vi == v);
}

TEST(Ea1Local, DirectSubstitution) {
    Vec w_next = Vec::Zero(1);
    Vec zeta = Vec::Constant(1, 2.0);
    auto [wi, vi] = ea::ea1_local(w_next, Vec::Zero(1), zeta, Vec::Zero(1), Vec::Zero(1), 1.0, 1.0);
    EXPECT_DOUBLE_EQ(wi(0), -1.0);
    (void)vi;
}

// Oracle: numeric minimizer of the proximal-linear surrogate.
TEST(Ea1Local, MatchesQuadraticSurrogateMinimizer) {
    Rng rng(505);
    const int wd = 4, vd = 3;
    for (int trial = 0; trial < 20; ++trial) {
        const double rho = rng.uniform(0.5, 30.0), sigma = rng.uniform(0.5, 30.0);
        Vec w_next = random_vec(rng, wd), v_prev = random_vec(rng, vd);
        Vec zeta = random_vec(rng, wd), xi = random_vec(rng, vd), pi = random_vec(rng, wd);
        auto surrogate = [&](const Vec& z) {
            Vec wi = z.head(wd), vi = z.tail(vd);
            double f = zeta.dot(wi - w_next) + xi.dot(vi - v_prev);
            f += 0.5 * rho * ((wi - w_next).squaredNorm() + (vi - v_prev).squaredNorm());
            f += pi.dot(wi - w_next) + 0.5 * sigma * (wi - w_next).squaredNorm();
            return f;
        };
        Vec z0(wd + vd);
        z0 << w_next, v_prev;
        Vec numeric = numeric_argmin(surrogate, z0);
        auto [wi, vi] = ea::ea1_local(w_next, v_prev, zeta, xi, pi, rho, sigma);
        EXPECT_LT((numeric.head(wd) - wi).norm(), 1e-8);
        EXPECT_LT((numeric.tail(vd) - vi).norm(), 1e-8);
    }
}

TEST(Ea1Multiplier, UnchangedAtConsensusAndSubstitution) {
    Vec pi = Vec::Constant(1, 0.5);
    Vec w = Vec::Constant(1, 2.0);
    EXPECT_TRUE(ea::ea1_multiplier(pi, w, w, 25.0) == pi);
    Vec wi = Vec::Constant(1, 2.1);
    Vec next = ea::ea1_multiplier(pi, wi, w, 25.0);
    EXPECT_NEAR(next(0), 0.5 + 2.5, 1e-12);
}

TEST(SecondMoment, AccumulatorDecaysAndSubstitutes) {
    Vec r = Vec::Constant(3, 0.8);
    Vec r2 = ea::sm_accumulate(r, Vec::Zero(3), 0.9);
    EXPECT_NEAR(r2(0), 0.72, 1e-15);
    Vec r3 = ea::sm_accumulate(Vec::Zero(1), Vec::Ones(1), 0.9);
    EXPECT_NEAR(r3(0), 0.1, 1e-15);
}

namespace {

// Synthetic deterministic gradient field for step-level oracles.
ea::Ea1GradFn synthetic_gradfn(int wd, int vd, int n, std::uint64_t seed) {
    Rng rng(seed);
    auto A = std::make_shared<std::vector<Mat>>();
    auto C = std::make_shared<std::vector<Mat>>();
    for (int i = 0; i < n; ++i) {
        A->push_back(Mat::NullaryExpr(wd, wd, [&] { return rng.normal(); }));
        C->push_back(Mat::NullaryExpr(vd, vd, [&] { return rng.normal(); }));
    }
    ea::Ea1GradFn fn;
    fn.local_grads = [=](const Vec& w, const std::vector<Vec>& V) {
        std::vector<ea::EnvGrad> out;
        for (int i = 0; i < n; ++i)
            out.push_back({(*A)[i] * w, (*C)[i] * V[i], w.squaredNorm()});
        return out;
    };
    fn.mean_w_grad = [=](const Vec& w, const std::vector<Vec>&) { return Vec(w.array().sin().matrix()); };
    return fn;
}

ea::EaPhase1State synthetic_state(int wd, int vd, int n, std::uint64_t seed) {
    Rng rng(seed);
    ea::EaPhase1State st;
    st.w = random_vec(rng, wd);
    for (int i = 0; i < n; ++i) {
        st.W.push_back(random_vec(rng, wd));
        st.V.push_back(random_vec(rng, vd));
        st.Pi.push_back(random_vec(rng, wd));
    }
    st.r = Vec::Zero(wd);
    return st;
}

}  // namespace

// Oracle: independent line-by-line re-implementation of the extended update.
TEST(SecondMoment, FullStepMatchesDualImplementation) {
    const int wd = 5, vd = 3, n = 3;
    ea::Ea1Config cfg;
    cfg.sigma = 4.0;
    cfg.rho = 6.0;
    cfg.varpi = 0.9;
    cfg.epsilon = 1e-8;
    ea::Ea1GradFn fn = synthetic_gradfn(wd, vd, n, 21);
    ea::EaPhase1State st = synthetic_state(wd, vd, n, 22);
    ea::EaPhase1State ref = st;

    ea::ea1_second_moment_step(st, fn, cfg);

    // reference path
    Vec g = fn.mean_w_grad(ref.w, ref.V);
    Vec r = cfg.varpi * ref.r + (1.0 - cfg.varpi) * g.cwiseProduct(g);
    Vec scale = (r.cwiseSqrt().array() + cfg.epsilon).matrix();
    Vec w = Vec::Zero(wd);
    for (int i = 0; i < n; ++i) w += ref.W[i] + (ref.Pi[i].array() / (cfg.sigma * scale.array())).matrix();
    w /= n;
    auto grads = fn.local_grads(w, ref.V);
    for (int i = 0; i < n; ++i) {
        Vec wi = w - ((grads[i].zeta + ref.Pi[i]).array() / ((cfg.rho + cfg.sigma) * scale.array())).matrix();
        Vec vi = ref.V[i] - grads[i].xi / cfg.rho;
        Vec pi = ref.Pi[i] + cfg.sigma * (wi - w);
        EXPECT_LT((st.W[i] - wi).norm(), 1e-13);
        EXPECT_LT((st.V[i] - vi).norm(), 1e-13);
        EXPECT_LT((st.Pi[i] - pi).norm(), 1e-13);
    }
    EXPECT_LT((st.w - w).norm(), 1e-13);
    EXPECT_LT((st.r - r).norm(), 1e-15);
}

// Unit scaling vector reproduces the plain algorithm exactly.
TEST(SecondMoment, UnitScaleReproducesPlainIterates) {
    const int wd = 4, vd = 2, n = 3;
    ea::Ea1Config plain;
    plain.sigma = 3.0;
    plain.rho = 5.0;
    ea::Ea1Config extended = plain;
    extended.varpi = 0.5;
    extended.epsilon = 0.0;

    ea::Ea1GradFn fn = synthetic_gradfn(wd, vd, n, 31);
    fn.mean_w_grad = [](const Vec& w, const std::vector<Vec>&) { return Vec(Vec::Ones(w.size())); };

    ea::EaPhase1State a = synthetic_state(wd, vd, n, 32);
    ea::EaPhase1State b = a;
    b.r = Vec::Ones(wd);  // varpi*1 + (1-varpi)*1 stays exactly one

    for (int it = 0; it < 5; ++it) {
        ea::ea1_step(a, fn, plain);
        ea::ea1_second_moment_step(b, fn, extended);
        ASSERT_TRUE(a.w == b.w) << "iteration " << it;
        for (int i = 0; i < n; ++i) {
            ASSERT_TRUE(a.W[i] == b.W[i]);
            ASSERT_TRUE(a.V[i] == b.V[i]);
            ASSERT_TRUE(a.Pi[i] == b.Pi[i]);
        }
    }
}

// Oracle: analytic least-squares optimum of the linear-regression toy.
TEST(Ea1Run, LinearToyApproachesLeastSquaresOptimum) {
    Rng rng(606);
    BaseModel model = linear_model(3, 2);
    nn::Batch data = linear_batch(rng, 3, 2, 32);

    // analytic optimum with bias folded in
    Mat Xa(4, 32);
    Xa.topRows(3) = data.X;
    Xa.row(3).setOnes();
    Mat Wstar = data.Y * Xa.transpose() * (Xa * Xa.transpose()).inverse();
    const double loss_opt = (Wstar * Xa - data.Y).squaredNorm();

    // the summed objective has curvature ~ 2 X X^T, so stable steps need
    // rho + sigma above that scale
    ea::Ea1Config cfg;
    cfg.sigma = 300.0;
    cfg.rho = 300.0;
    cfg.max_iters = 4000;
    cfg.consensus_tol = 0.0;
    ea::EaPhase1State st = ea::ea1_init(model, 1, 7);
    std::vector<double> losses;
    ea::Ea1Result res = ea::ea1_run(model, {data}, Loss::mse, std::move(st), cfg,
                                    [&](const TraceRow& row) { losses.push_back(row.loss); });
    EXPECT_LT(losses.back(), losses.front());
    EXPECT_NEAR(res.final_loss, loss_opt, 1e-4 * std::max(1.0, loss_opt));
}

TEST(Ea1Run, ConsensusResidualDropsOnMiniOfdmToy) {
    MiniOfdm toy = mini_ofdm(3);
    ea::Ea1Config cfg;
    cfg.sigma = cfg.rho = 100.0;
    cfg.max_iters = 800;
    cfg.threads = 2;
    ea::EaPhase1State st = ea::ea1_init(toy.model, toy.data.size(), 11);
    ea::Ea1Result res = ea::ea1_run(toy.model, toy.data, Loss::bce, std::move(st), cfg);
    EXPECT_LT(res.final_residual, 1e-3);
    EXPECT_LE(res.iterations, 800);

    // with the threshold disabled the loss keeps descending
    ea::Ea1Config train_cfg = cfg;
    train_cfg.consensus_tol = 0.0;
    train_cfg.max_iters = 900;
    std::vector<double> losses;
    ea::ea1_run(toy.model, toy.data, Loss::bce, ea::ea1_init(toy.model, 4, 11), train_cfg,
                [&](const TraceRow& r) { losses.push_back(r.loss); });
    EXPECT_LT(losses.back(), 0.7 * losses.front());
}

TEST(Ea1Run, DeterministicTraces) {
    MiniOfdm toy = mini_ofdm(5);
    ea::Ea1Config cfg;
    cfg.max_iters = 40;
    cfg.consensus_tol = 0.0;
    cfg.threads = 2;
    std::vector<double> t1, t2;
    ea::Ea1Result r1 = ea::ea1_run(toy.model, toy.data, Loss::bce, ea::ea1_init(toy.model, 4, 9), cfg,
                                   [&](const TraceRow& r) { t1.push_back(r.loss); });
    ea::Ea1Result r2 = ea::ea1_run(toy.model, toy.data, Loss::bce, ea::ea1_init(toy.model, 4, 9), cfg,
                                   [&](const TraceRow& r) { t2.push_back(r.loss); });
    ASSERT_EQ(t1.size(), t2.size());
    for (std::size_t i = 0; i < t1.size(); ++i) EXPECT_EQ(t1[i], t2[i]);
    EXPECT_TRUE(r1.state.w == r2.state.w);
}

TEST(Ea1Run, DivergenceRaisesAbortedRunWithTrace) {
    Rng rng(707);
    BaseModel model = linear_model(2, 2);
    nn::Batch data = linear_batch(rng, 2, 2, 8);
    ea::Ea1Config cfg;
    cfg.sigma = 1e-6;
    cfg.rho = 1e-6;  // absurd step sizes blow the iterates up
    cfg.max_iters = 200;
    try {
        ea::ea1_run(model, {data}, Loss::mse, ea::ea1_init(model, 1, 1), cfg);
        FAIL() << "expected AbortedRun";
    } catch (const ea::AbortedRun& e) {
        EXPECT_FALSE(e.trace.empty());
    }
}

// With a single environment, zero multipliers and fresh state, one iteration
// is exactly a gradient step with rates 1/(rho+sigma) on w and 1/rho on v.
TEST(Ea1Run, ReducesToProximalGradientStepOnQuadratic) {
    Rng rng(808);
    BaseModel model = linear_model(2, 1);
    nn::Batch data = linear_batch(rng, 2, 1, 8);
    ea::Ea1Config cfg;
    cfg.sigma = 400.0;
    cfg.rho = 10.0;

    ea::EaPhase1State st = ea::ea1_init(model, 1, 3);
    const Vec w0 = st.W[0];
    ParamVector wp(w0, model.trunk.layout());
    nn::NetGrads g = nn::grad(model.trunk, wp, data, Loss::mse);

    ea::Ea1GradFn fn = ea::make_phase1_gradfn(model, {data}, Loss::mse, cfg);
    ea::ea1_step(st, fn, cfg);

    Vec expected = w0 - g.w.values / (cfg.rho + cfg.sigma);
    EXPECT_LT((st.W[0] - expected).norm(), 1e-12);
}

TEST(Ea1Run, MultiplierDriftBoundedAfterConvergence) {
    MiniOfdm toy = mini_ofdm(13);
    ea::Ea1Config cfg;
    cfg.sigma = cfg.rho = 100.0;
    cfg.max_iters = 800;
    cfg.threads = 2;
    ea::Ea1Result res = ea::ea1_run(toy.model, toy.data, Loss::bce, ea::ea1_init(toy.model, 4, 17), cfg);
    ASSERT_LT(res.final_residual, 1e-3);
    // pi' - pi = sigma (w_i - w), so the per-step drift obeys sigma * tol
    for (std::size_t i = 0; i < res.state.W.size(); ++i) {
        const double drift = cfg.sigma * (res.state.W[i] - res.state.w).norm();
        EXPECT_LT(drift, cfg.sigma * 1e-3);
    }
}

TEST(Ea2Steps, FixedPointsAndSubstitution) {
    Vec u = Vec::Constant(3, 2.0);
    EXPECT_TRUE(ea::ea2_v_step(u, Vec::Zero(3), 50.0) == u);
    Vec v = Vec::Constant(1, 5.0);
    Vec xi = Vec::Constant(1, 100.0);
    EXPECT_DOUBLE_EQ(ea::ea2_v_step(v, xi, 50.0)(0), 3.0);
    EXPECT_TRUE(ea::ea2_u_local(u, Vec::Zero(3), Vec::Zero(3), 50.0, 50.0) == u);
}

// Oracle: numeric minimizers of the phase-2 surrogates.
TEST(Ea2Steps, MatchQuadraticSurrogateMinimizers) {
    Rng rng(909);
    const int d = 5;
    for (int trial = 0; trial < 20; ++trial) {
        const double eta = rng.uniform(1.0, 80.0);
        const double gamma = rng.uniform(1.0, 80.0), mu = rng.uniform(1.0, 80.0);
        Vec v_prev = random_vec(rng, d), xi = random_vec(rng, d);
        auto v_surrogate = [&](const Vec& v) { return xi.dot(v) + 0.5 * eta * (v - v_prev).squaredNorm(); };
        EXPECT_LT((numeric_argmin(v_surrogate, v_prev) - ea::ea2_v_step(v_prev, xi, eta)).norm(), 1e-8);

        Vec u_next = random_vec(rng, d), zeta = random_vec(rng, d), z = random_vec(rng, d);
        auto u_surrogate = [&](const Vec& u) {
            return zeta.dot(u) + 0.5 * gamma * (u - u_next).squaredNorm() + z.dot(u) +
                   0.5 * mu * (u - u_next).squaredNorm();
        };
        EXPECT_LT((numeric_argmin(u_surrogate, u_next) - ea::ea2_u_local(u_next, zeta, z, gamma, mu)).norm(),
                  1e-8);
    }
}

TEST(Ea2Run, ObjectiveDecreasesOnMiniToy) {
    MiniOfdm toy = mini_ofdm(23);
    ea::Ea1Config cfg1;
    cfg1.max_iters = 300;
    cfg1.threads = 2;
    ea::Ea1Result phase1 = ea::ea1_run(toy.model, toy.data, Loss::bce, ea::ea1_init(toy.model, 4, 29), cfg1);

    HyperNet hyper;
    hyper.embed = nn::Network{{nn::conv1d(4, 2, 3, 8, Activation::tanh_fn), nn::dense(16, 6, Activation::tanh_fn)}};
    for (const auto& a : toy.model.adapters)
        hyper.generators.push_back(nn::Network{{nn::dense(6, 2 * a.channels, Activation::identity)}});
    hyper.validate_against(toy.model);

    ofdm::Pdp new_env = ofdm::dissimilar_pdp({}, 31, 3);
    EnvironmentDataset few = ofdm::make_dataset(new_env, 8, 10.0, 8, 2, 37);

    std::vector<Mat> env_inputs;
    for (const auto& d : toy.data) env_inputs.push_back(d.X);
    ParamVector w_star(phase1.state.w, toy.model.trunk.layout());

    ea::Ea2Problem pb;
    pb.model = &toy.model;
    pb.hyper = &hyper;
    pb.w_star = &w_star;
    pb.v_star = &phase1.state.V;
    pb.env_inputs = &env_inputs;
    pb.few_shot = few.batch();
    pb.kind = Loss::bce;

    ea::Ea2Config cfg2;
    cfg2.max_iters = 120;
    cfg2.consensus_tol = 0.0;
    cfg2.threads = 2;
    std::vector<double> obj;
    ea::Ea2Result res = ea::ea2_run(pb, ea::ea2_init(hyper, phase1.state.V, 41), cfg2,
                                    [&](const TraceRow& r) { obj.push_back(r.loss); });
    EXPECT_LT(obj.back(), obj.front());
    EXPECT_EQ(res.iterations, 120);
}

TEST(EaPredict, IdentityInitEqualsTrunkPrediction) {
    MiniOfdm toy = mini_ofdm(43);
    Rng rng(2);
    ParamVector w = nn::init_params(toy.model.trunk, rng);
    ParamVector v = toy.model.identity_v();
    nn::Network bare = toy.model.trunk;
    for (auto& l : bare.layers) l.adapter = false;
    Vec x = random_vec(rng, toy.model.trunk.input_size());
    Vec a = ea::ea_predict(toy.model, w, v, x);
    Vec b = nn::forward(bare, w, x);
    EXPECT_TRUE(a == b);
}
