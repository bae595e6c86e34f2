#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <numeric>
#include <set>
#include <vector>

#include "fsadapt/dataset.hpp"

namespace fsadapt::ofdm {

using cplx = std::complex<double>;

// Power delay profile over symbol-spaced delays; defines one propagation
// environment. Powers are normalized to sum to one.
struct Pdp {
    std::vector<int> delays;
    std::vector<double> powers;

    void validate() const {
        if (delays.empty() || delays.size() != powers.size()) throw ConfigError("pdp: empty or ragged");
        for (std::size_t i = 1; i < delays.size(); ++i)
            if (delays[i] <= delays[i - 1]) throw ConfigError("pdp: delays must be strictly increasing");
        double total = 0.0;
        for (double p : powers) {
            if (!(p >= 0.0)) throw ConfigError("pdp: negative power");
            total += p;
        }
        if (std::abs(total - 1.0) > 1e-9) throw ConfigError("pdp: powers must sum to 1");
    }
};

// Random normalized PDP with an exponentially decaying profile. The delay
// support always contains 0; remaining delays are distinct draws.
inline Pdp sample_environment(std::uint64_t seed, int paths, int max_delay = 0) {
    if (paths < 1) throw UsageError("sample_environment: path count must be >= 1");
    if (max_delay <= 0) max_delay = std::max(3 * paths, 6);
    Rng rng(derive_seed(seed, 0xe0f));
    Pdp pdp;
    pdp.delays.push_back(0);
    std::set<int> used{0};
    while (static_cast<int>(pdp.delays.size()) < paths) {
        int d = static_cast<int>(rng.integer(1, max_delay));
        if (used.insert(d).second) pdp.delays.push_back(d);
    }
    std::sort(pdp.delays.begin(), pdp.delays.end());
    const double decay = 0.35 * max_delay + 1.0;
    double total = 0.0;
    for (int d : pdp.delays) {
        const double p = std::exp(-d / decay) * rng.uniform(0.4, 1.0);
        pdp.powers.push_back(p);
        total += p;
    }
    for (double& p : pdp.powers) p /= total;
    pdp.validate();
    return pdp;
}

// Similar environment: same delay support, powers jittered by at most
// `jitter` (relative) and renormalized.
inline Pdp perturb_pdp(const Pdp& base, double jitter, std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x51a));
    Pdp pdp = base;
    double total = 0.0;
    for (double& p : pdp.powers) {
        p *= 1.0 + rng.uniform(-jitter, jitter);
        total += p;
    }
    for (double& p : pdp.powers) p /= total;
    pdp.validate();
    return pdp;
}

// Dissimilar environment: fresh PDP whose delay support differs from every
// profile in `avoid`.
inline Pdp dissimilar_pdp(const std::vector<Pdp>& avoid, std::uint64_t seed, int paths, int max_delay = 0) {
    for (std::uint64_t k = 0; k < 1000; ++k) {
        Pdp cand = sample_environment(derive_seed(seed, 0xd1f + k), paths, max_delay);
        bool clash = false;
        for (const auto& a : avoid) clash = clash || (a.delays == cand.delays);
        if (!clash) return cand;
    }
    throw UsageError("dissimilar_pdp: could not find a distinct delay support");
}

// One OFDM frame: a pilot block (known symbols at pilot positions, zero
// elsewhere) followed by one data block of BPSK symbols. The channel is
// constant within a frame.
struct OfdmFrame {
    int k_sub = 0;
    std::vector<int> pilot_pos;
    std::vector<double> pilot_sym;  // +-1
    std::vector<int> data_bits;     // k_sub entries, 0/1

    void validate() const {
        if (k_sub <= 0) throw ConfigError("frame: k_sub must be positive");
        if (pilot_pos.size() != pilot_sym.size()) throw ConfigError("frame: pilot arrays ragged");
        if (static_cast<int>(pilot_pos.size()) > k_sub) throw ConfigError("frame: more pilots than subcarriers");
        if (static_cast<int>(data_bits.size()) != k_sub) throw ConfigError("frame: data bits must cover all subcarriers");
    }
};

inline std::vector<int> pilot_positions(int k_sub, int n_pilot) {
    if (n_pilot < 1 || n_pilot > k_sub) throw UsageError("pilot_positions: need 1..k_sub pilots");
    std::vector<int> pos;
    for (int i = 0; i < n_pilot; ++i) pos.push_back(static_cast<int>(std::llround(i * double(k_sub) / n_pilot)));
    pos.erase(std::unique(pos.begin(), pos.end()), pos.end());
    return pos;
}

inline OfdmFrame make_frame(int k_sub, int n_pilot, Rng& rng) {
    OfdmFrame f;
    f.k_sub = k_sub;
    f.pilot_pos = pilot_positions(k_sub, n_pilot);
    f.pilot_sym.assign(f.pilot_pos.size(), 1.0);
    f.data_bits.resize(k_sub);
    for (int& b : f.data_bits) b = static_cast<int>(rng.integer(0, 1));
    f.validate();
    return f;
}

inline double bpsk(int bit) { return bit == 0 ? 1.0 : -1.0; }

struct TxSymbols {
    std::vector<cplx> pilot;  // k_sub entries
    std::vector<cplx> data;
};

inline TxSymbols modulate(const OfdmFrame& f) {
    f.validate();
    TxSymbols tx;
    tx.pilot.assign(f.k_sub, cplx(0.0, 0.0));
    for (std::size_t i = 0; i < f.pilot_pos.size(); ++i) tx.pilot[f.pilot_pos[i]] = cplx(f.pilot_sym[i], 0.0);
    tx.data.resize(f.k_sub);
    for (int k = 0; k < f.k_sub; ++k) tx.data[k] = cplx(bpsk(f.data_bits[k]), 0.0);
    return tx;
}

// Complex path gains; E|alpha_l|^2 = 1 before PDP weighting.
struct ChannelRealization {
    std::vector<cplx> alphas;
    std::vector<cplx> taps;  // sqrt(P_l) * alpha_l
    double noise_var = 0.0;
};

inline ChannelRealization draw_channel(const Pdp& pdp, Rng& rng) {
    pdp.validate();
    ChannelRealization ch;
    for (std::size_t l = 0; l < pdp.delays.size(); ++l) {
        const cplx a(rng.normal(0.0, std::sqrt(0.5)), rng.normal(0.0, std::sqrt(0.5)));
        ch.alphas.push_back(a);
        ch.taps.push_back(std::sqrt(pdp.powers[l]) * a);
    }
    return ch;
}

// Per-subcarrier gains of the cyclic-prefix OFDM channel.
inline std::vector<cplx> freq_response(const Pdp& pdp, const ChannelRealization& ch, int k_sub) {
    std::vector<cplx> H(k_sub, cplx(0.0, 0.0));
    for (int k = 0; k < k_sub; ++k)
        for (std::size_t l = 0; l < pdp.delays.size(); ++l)
            H[k] += ch.taps[l] * std::polar(1.0, -2.0 * M_PI * k * pdp.delays[l] / double(k_sub));
    return H;
}

struct RxBlocks {
    std::vector<cplx> pilot;
    std::vector<cplx> data;
    double noise_var = 0.0;
};

// Applies per-subcarrier gains and AWGN. Noise variance follows the measured
// per-frame signal power (unit reference when the frame is silent); infinite
// snr_db disables noise.
inline RxBlocks apply_channel(const std::vector<cplx>& H, const TxSymbols& tx, double snr_db, Rng& rng) {
    const int K = static_cast<int>(tx.pilot.size());
    RxBlocks rx;
    rx.pilot.resize(K);
    rx.data.resize(K);
    double sig_power = 0.0;
    for (int k = 0; k < K; ++k) {
        rx.pilot[k] = H[k] * tx.pilot[k];
        rx.data[k] = H[k] * tx.data[k];
        sig_power += std::norm(rx.pilot[k]) + std::norm(rx.data[k]);
    }
    sig_power /= 2.0 * K;
    if (sig_power <= 0.0) sig_power = 1.0;
    if (std::isinf(snr_db)) return rx;
    rx.noise_var = sig_power / std::pow(10.0, snr_db / 10.0);
    const double s = std::sqrt(rx.noise_var / 2.0);
    for (int k = 0; k < K; ++k) {
        rx.pilot[k] += cplx(rng.normal(0.0, s), rng.normal(0.0, s));
        rx.data[k] += cplx(rng.normal(0.0, s), rng.normal(0.0, s));
    }
    return rx;
}

// Model input: channel-major blocks [Re pilot | Im pilot | Re data | Im data],
// each of length k_sub, matching a 4-channel 1-D convolution front end.
inline Vec pack_input(const RxBlocks& rx) {
    const int K = static_cast<int>(rx.pilot.size());
    Vec x(4 * K);
    for (int k = 0; k < K; ++k) {
        x(k) = rx.pilot[k].real();
        x(K + k) = rx.pilot[k].imag();
        x(2 * K + k) = rx.data[k].real();
        x(3 * K + k) = rx.data[k].imag();
    }
    return x;
}

inline Vec transmit_receive(const Pdp& pdp, const OfdmFrame& frame, double snr_db, Rng& rng) {
    ChannelRealization ch = draw_channel(pdp, rng);
    std::vector<cplx> H = freq_response(pdp, ch, frame.k_sub);
    return pack_input(apply_channel(H, modulate(frame), snr_db, rng));
}

// Pairs (received pilot+data blocks, transmitted data bits).
inline EnvironmentDataset make_dataset(const Pdp& pdp, int count, double snr_db, int k_sub, int n_pilot,
                                       std::uint64_t seed) {
    if (count < 1) throw UsageError("make_dataset: count must be >= 1");
    Rng rng(derive_seed(seed, 0x0fd));
    EnvironmentDataset ds;
    ds.meta.task = TaskKind::ofdm;
    ds.meta.k_sub = static_cast<std::uint32_t>(k_sub);
    ds.meta.pilot_count = static_cast<std::uint32_t>(n_pilot);
    ds.X.resize(4 * k_sub, count);
    ds.Y.resize(k_sub, count);
    for (int t = 0; t < count; ++t) {
        OfdmFrame frame = make_frame(k_sub, n_pilot, rng);
        ds.X.col(t) = transmit_receive(pdp, frame, snr_db, rng);
        for (int k = 0; k < k_sub; ++k) ds.Y(k, t) = static_cast<double>(frame.data_bits[k]);
    }
    return ds;
}

// Fraction of hard-decision errors; outputs are per-bit probabilities.
inline double ber(const Mat& outputs, const Mat& bits) {
    if (outputs.rows() != bits.rows() || outputs.cols() != bits.cols())
        throw UsageError("ber: output and label shapes differ");
    Eigen::Index errors = 0;
    for (Eigen::Index j = 0; j < outputs.cols(); ++j)
        for (Eigen::Index i = 0; i < outputs.rows(); ++i) {
            const int decided = outputs(i, j) > 0.5 ? 1 : 0;
            if (decided != static_cast<int>(std::lround(bits(i, j)))) ++errors;
        }
    return static_cast<double>(errors) / static_cast<double>(outputs.size());
}

// Least-squares channel estimation at the pilots, linear interpolation across
// subcarriers, one-tap equalization. The conventional-receiver reference used
// by the pilot-count study.
inline std::vector<int> ls_decide_bits(const RxBlocks& rx, const OfdmFrame& frame) {
    const int K = frame.k_sub;
    const int P = static_cast<int>(frame.pilot_pos.size());
    std::vector<cplx> est(P);
    for (int i = 0; i < P; ++i) est[i] = rx.pilot[frame.pilot_pos[i]] / frame.pilot_sym[i];
    std::vector<cplx> H(K);
    for (int k = 0; k < K; ++k) {
        if (k <= frame.pilot_pos.front()) {
            H[k] = est.front();
        } else if (k >= frame.pilot_pos.back()) {
            H[k] = est.back();
        } else {
            int i = 0;
            while (frame.pilot_pos[i + 1] < k) ++i;
            const double t = double(k - frame.pilot_pos[i]) / double(frame.pilot_pos[i + 1] - frame.pilot_pos[i]);
            H[k] = (1.0 - t) * est[i] + t * est[i + 1];
        }
    }
    std::vector<int> bits(K);
    for (int k = 0; k < K; ++k) {
        const cplx eq = rx.data[k] / (std::abs(H[k]) > 1e-12 ? H[k] : cplx(1e-12, 0.0));
        bits[k] = eq.real() >= 0.0 ? 0 : 1;
    }
    return bits;
}

// Monte-Carlo BER of the LS-equalizer receiver on one environment.
inline double ls_equalizer_ber(const Pdp& pdp, int k_sub, int n_pilot, double snr_db, int frames,
                               std::uint64_t seed) {
    Rng rng(derive_seed(seed, 0x15e));
    Eigen::Index errors = 0, total = 0;
    for (int f = 0; f < frames; ++f) {
        OfdmFrame frame = make_frame(k_sub, n_pilot, rng);
        ChannelRealization ch = draw_channel(pdp, rng);
        std::vector<cplx> H = freq_response(pdp, ch, k_sub);
        RxBlocks rx = apply_channel(H, modulate(frame), snr_db, rng);
        std::vector<int> decided = ls_decide_bits(rx, frame);
        for (int k = 0; k < k_sub; ++k) {
            errors += (decided[k] != frame.data_bits[k]);
            ++total;
        }
    }
    return static_cast<double>(errors) / static_cast<double>(total);
}

}  // namespace fsadapt::ofdm
