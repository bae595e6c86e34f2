#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "fsadapt/dataset.hpp"

namespace fsadapt::mmwave {

using cplx = std::complex<double>;
using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;

// Uniform linear array steering vector with unit-modulus entries; elevation is
// folded into the effective spatial frequency.
inline CVec array_response(int antennas, double theta, double vartheta = 0.0) {
    if (antennas < 1) throw UsageError("array_response: need at least one antenna");
    const double psi = M_PI * std::sin(theta) * std::cos(vartheta);
    CVec a(antennas);
    for (int m = 0; m < antennas; ++m) a(m) = std::polar(1.0, psi * m);
    return a;
}

// Truncated-sinc pulse shape evaluated at t (in units of the sampling period).
inline double pulse(double t_over_ts) {
    if (t_over_ts == 0.0) return 1.0;
    const double x = M_PI * t_over_ts;
    return std::sin(x) / x;
}

// One representative ray of a cluster, fully resolved for a channel draw.
struct ResolvedCluster {
    double tau = 0.0;  // seconds
    double theta = 0.0;
    double vartheta = 0.0;
    cplx alpha{1.0, 0.0};
};

// Delay-domain channel vectors h_d (columns d = 0..D-1).
inline CMat delay_taps(int antennas, double path_loss, const std::vector<ResolvedCluster>& clusters, int taps,
                       double ts) {
    CMat H = CMat::Zero(antennas, taps);
    const double scale = std::sqrt(static_cast<double>(antennas) / path_loss);
    for (const auto& c : clusters) {
        const CVec a = array_response(antennas, c.theta, c.vartheta);
        for (int d = 0; d < taps; ++d) {
            const double p = pulse((d * ts - c.tau) / ts);
            if (p != 0.0) H.col(d) += scale * c.alpha * p * a;
        }
    }
    return H;
}

// Frequency-domain channel vectors h_k (columns k = 0..K-1) as the DFT of the
// delay taps.
inline CMat freq_channels(const CMat& taps, int subcarriers) {
    CMat H = CMat::Zero(taps.rows(), subcarriers);
    const int D = static_cast<int>(taps.cols());
    for (int k = 0; k < subcarriers; ++k)
        for (int d = 0; d < D; ++d)
            H.col(k) += taps.col(d) * std::polar(1.0, -2.0 * M_PI * k * d / double(subcarriers));
    return H;
}

// Mean cluster geometry of one BS within an environment.
struct ClusterGeometry {
    double tau = 0.0;
    double theta = 0.0;
    double vartheta = 0.0;
    double gain = 1.0;  // mean amplitude scale
};

struct BsGeometry {
    std::vector<ClusterGeometry> clusters;
    double path_loss = 1.0;
};

struct MmwaveEnv {
    int num_bs = 2;
    int antennas = 16;
    int subcarriers = 32;
    int taps = 32;
    double ts = 1.0;
    double angle_jitter = 0.06;   // radians, driven by the per-draw user offset
    double delay_jitter = 0.75;   // sampling periods, same driver
    std::vector<BsGeometry> bs;
};

struct MmwaveEnvConfig {
    int num_bs = 2;
    int antennas = 16;
    int subcarriers = 32;
    int clusters = 3;
    double ts = 1.0;
    double angle_jitter = 0.06;
    double delay_jitter = 0.75;
};

// Environment diversity comes from re-drawing cluster geometry and path
// losses per environment id.
inline MmwaveEnv make_environment(const MmwaveEnvConfig& cfg, std::uint64_t seed) {
    if (cfg.num_bs < 1 || cfg.clusters < 1) throw UsageError("make_environment: need >= 1 BS and cluster");
    Rng rng(derive_seed(seed, 0x33e));
    MmwaveEnv env;
    env.num_bs = cfg.num_bs;
    env.antennas = cfg.antennas;
    env.subcarriers = cfg.subcarriers;
    env.taps = cfg.subcarriers;
    env.ts = cfg.ts;
    env.angle_jitter = cfg.angle_jitter;
    env.delay_jitter = cfg.delay_jitter;
    for (int b = 0; b < cfg.num_bs; ++b) {
        BsGeometry g;
        g.path_loss = cfg.antennas * rng.uniform(0.8, 1.6);
        for (int l = 0; l < cfg.clusters; ++l) {
            ClusterGeometry c;
            c.theta = rng.uniform(-1.0, 1.0);
            c.vartheta = rng.uniform(-0.3, 0.3);
            c.tau = rng.uniform(0.0, 0.55 * env.taps * cfg.ts);
            c.gain = (l == 0 ? 1.0 : (l == 1 ? 0.35 : 0.15)) * rng.uniform(0.8, 1.2);
            g.clusters.push_back(c);
        }
        env.bs.push_back(g);
    }
    return env;
}

// One coherence block: the channel stays constant while beams are trained and
// data is sent.
struct ChannelSample {
    std::vector<CMat> taps;  // per BS, antennas x D
    std::vector<CMat> freq;  // per BS, antennas x K
};

inline ChannelSample gen_channel(const MmwaveEnv& env, Rng& rng) {
    if (env.bs.empty()) throw UsageError("gen_channel: environment has no base stations");
    ChannelSample ch;
    // A single user-position offset drives angle and delay jitter jointly, so
    // the omni-received delay profile carries angle information.
    const double s = rng.uniform(-1.0, 1.0);
    for (const auto& g : env.bs) {
        std::vector<ResolvedCluster> rc;
        for (const auto& c : g.clusters) {
            ResolvedCluster r;
            r.theta = c.theta + env.angle_jitter * s;
            r.vartheta = c.vartheta;
            r.tau = std::max(0.0, c.tau + env.delay_jitter * env.ts * s);
            r.alpha = c.gain * cplx(rng.normal(0.0, std::sqrt(0.5)), rng.normal(0.0, std::sqrt(0.5)));
            rc.push_back(r);
        }
        CMat taps = delay_taps(env.antennas, g.path_loss, rc, env.taps, env.ts);
        ch.freq.push_back(freq_channels(taps, env.subcarriers));
        ch.taps.push_back(std::move(taps));
    }
    return ch;
}

// Analog beam codebook: steering vectors on a sin-space grid with Q-bit
// quantized phase shifters; every entry has modulus 1/sqrt(M) exactly.
struct Codebook {
    CMat beams;  // antennas x n_codewords
    int size() const { return static_cast<int>(beams.cols()); }
};

inline Codebook make_codebook(int antennas, int n_codewords, int phase_bits = 6) {
    if (antennas < 1 || n_codewords < 1) throw UsageError("make_codebook: bad sizes");
    const int levels = 1 << phase_bits;
    const double step = 2.0 * M_PI / levels;
    const double norm = 1.0 / std::sqrt(static_cast<double>(antennas));
    Codebook cb;
    cb.beams.resize(antennas, n_codewords);
    for (int t = 0; t < n_codewords; ++t) {
        const double sin_theta = -1.0 + (2.0 * t + 1.0) / n_codewords;
        const double psi = M_PI * sin_theta;
        for (int m = 0; m < antennas; ++m) {
            const double raw = psi * m;
            const double q = step * std::round(raw / step);
            cb.beams(m, t) = std::polar(norm, q);
        }
    }
    return cb;
}

// Received power of one beam across subcarriers at one BS.
inline double beam_power(const CMat& h_freq, const CVec& beam) {
    double p = 0.0;
    for (Eigen::Index k = 0; k < h_freq.cols(); ++k) p += std::norm(h_freq.col(k).dot(beam));
    return p;
}

struct TimingBudget {
    double beam_coherence = 1.0;  // T_B
    double pilot_time = 0.02;     // T_p
    int n_codewords = 16;         // N_tr; training time is N_tr * T_p

    double train_time() const { return n_codewords * pilot_time; }
};

// (1/K) sum_k log2(1 + rho * (sum_b |<h_kb, f_b>|^2)^2), the shared core of
// both rate definitions.
inline double rate_core(const ChannelSample& ch, const std::vector<CVec>& beams, double rho) {
    const int K = static_cast<int>(ch.freq.front().cols());
    double acc = 0.0;
    for (int k = 0; k < K; ++k) {
        double s = 0.0;
        for (std::size_t b = 0; b < ch.freq.size(); ++b) s += std::norm(ch.freq[b].col(k).dot(beams[b]));
        acc += std::log2(1.0 + rho * s * s);
    }
    return acc / K;
}

struct BaselineResult {
    double rate = 0.0;
    std::vector<int> beams;
};

// Exhaustive beam training: every BS scores every codeword by received power
// and the achievable rate is discounted by the full sweep time.
inline BaselineResult rate_baseline(const ChannelSample& ch, const Codebook& cb, const TimingBudget& budget,
                                    double rho) {
    if (cb.size() == 0) throw UsageError("rate_baseline: empty codebook");
    BaselineResult out;
    std::vector<CVec> chosen;
    for (const auto& h : ch.freq) {
        int best = 0;
        double best_power = -1.0;
        for (int t = 0; t < cb.size(); ++t) {
            const double p = beam_power(h, cb.beams.col(t));
            if (p > best_power) {
                best_power = p;
                best = t;
            }
        }
        out.beams.push_back(best);
        chosen.push_back(cb.beams.col(best));
    }
    const double prefactor = std::max(0.0, 1.0 - budget.train_time() / budget.beam_coherence);
    out.rate = prefactor * rate_core(ch, chosen, rho);
    return out;
}

// Learned beam selection costs two pilot slots (omni uplink plus the predicted
// beam) regardless of codebook size.
inline double rate_dl(const ChannelSample& ch, const Codebook& cb, const std::vector<int>& beam_idx,
                      const TimingBudget& budget, double rho) {
    std::vector<CVec> beams;
    for (std::size_t b = 0; b < ch.freq.size(); ++b) {
        if (beam_idx[b] < 0 || beam_idx[b] >= cb.size()) throw UsageError("rate_dl: beam index outside codebook");
        beams.push_back(cb.beams.col(beam_idx[b]));
    }
    const double prefactor = std::max(0.0, 1.0 - 2.0 * budget.pilot_time / budget.beam_coherence);
    return prefactor * rate_core(ch, beams, rho);
}

// Omni uplink pilot features: element-0 reception per BS and subcarrier,
// real/imag stacked, with AWGN at the pilot SNR.
inline Vec omni_features(const ChannelSample& ch, double pilot_snr_db, Rng& rng) {
    const int B = static_cast<int>(ch.freq.size());
    const int K = static_cast<int>(ch.freq.front().cols());
    Vec x(2 * B * K);
    double sig = 0.0;
    std::vector<cplx> r(static_cast<std::size_t>(B) * K);
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
            const cplx v = ch.freq[b](0, k);
            r[b * K + k] = v;
            sig += std::norm(v);
        }
    sig /= static_cast<double>(B * K);
    if (sig <= 0.0) sig = 1.0;
    const double noise_var = std::isinf(pilot_snr_db) ? 0.0 : sig / std::pow(10.0, pilot_snr_db / 10.0);
    const double s = std::sqrt(noise_var / 2.0);
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < K; ++k) {
            cplx v = r[b * K + k];
            if (noise_var > 0.0) v += cplx(rng.normal(0.0, s), rng.normal(0.0, s));
            x(b * 2 * K + k) = v.real();
            x(b * 2 * K + K + k) = v.imag();
        }
    return x;
}

// Per-beam achievable-rate labels for one BS, normalized to [0,1] by the
// per-sample maximum (the argmax is preserved).
inline Vec beam_rate_labels(const CMat& h_freq, const Codebook& cb, double rho) {
    const int K = static_cast<int>(h_freq.cols());
    Vec q(cb.size());
    for (int t = 0; t < cb.size(); ++t) {
        double acc = 0.0;
        for (int k = 0; k < K; ++k) acc += std::log2(1.0 + rho * std::norm(h_freq.col(k).dot(cb.beams.col(t))));
        q(t) = acc / K;
    }
    const double mx = q.maxCoeff();
    if (mx > 0.0) q /= mx;
    return q;
}

// Beam-selection dataset for one BS: coordinated omni pilots in, that BS's
// normalized per-beam rates out. The channel draws are returned alongside so
// rate evaluation can reuse them.
struct BfDataset {
    EnvironmentDataset data;
    std::vector<ChannelSample> channels;
};

inline BfDataset make_bf_dataset(const MmwaveEnv& env, const Codebook& cb, int count, double pilot_snr_db,
                                 double rho, int bs_index, std::uint64_t seed) {
    if (count < 1) throw UsageError("make_bf_dataset: count must be >= 1");
    if (bs_index < 0 || bs_index >= env.num_bs) throw UsageError("make_bf_dataset: bad BS index");
    Rng rng(derive_seed(seed, 0xbf0));
    BfDataset out;
    out.data.meta.task = TaskKind::mmwave;
    out.data.meta.k_sub = static_cast<std::uint32_t>(env.subcarriers);
    out.data.meta.pilot_count = 0;
    out.data.X.resize(2 * env.num_bs * env.subcarriers, count);
    out.data.Y.resize(cb.size(), count);
    for (int t = 0; t < count; ++t) {
        ChannelSample ch = gen_channel(env, rng);
        out.data.X.col(t) = omni_features(ch, pilot_snr_db, rng);
        out.data.Y.col(t) = beam_rate_labels(ch.freq[bs_index], cb, rho);
        out.channels.push_back(std::move(ch));
    }
    return out;
}

// make_bf_dataset over an environment collection (one dataset per env).
inline std::vector<BfDataset> make_bf_datasets(const std::vector<MmwaveEnv>& envs, const Codebook& cb, int count,
                                               double pilot_snr_db, double rho, int bs_index, std::uint64_t seed) {
    if (envs.empty()) throw UsageError("make_bf_datasets: empty environment set");
    std::vector<BfDataset> out;
    for (std::size_t i = 0; i < envs.size(); ++i)
        out.push_back(make_bf_dataset(envs[i], cb, count, pilot_snr_db, rho, bs_index, derive_seed(seed, i)));
    return out;
}

}  // namespace fsadapt::mmwave
