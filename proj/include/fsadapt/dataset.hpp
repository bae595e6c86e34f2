#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "fsadapt/network.hpp"
#include "fsadapt/param_vector.hpp"

namespace fsadapt {

enum class TaskKind : std::uint32_t { ofdm = 0, mmwave = 1 };

struct DatasetMeta {
    std::uint32_t version = 1;
    TaskKind task = TaskKind::ofdm;
    std::uint32_t k_sub = 0;        // subcarrier count (both tasks)
    std::uint32_t pilot_count = 0;  // OFDM pilots; 0 for beam datasets
};

// Per-environment sample set. Columns of X and Y are paired samples.
struct EnvironmentDataset {
    DatasetMeta meta;
    Mat X;
    Mat Y;

    Eigen::Index count() const { return X.cols(); }

    nn::Batch batch() const { return nn::Batch{X, Y}; }
    // First `k` columns, for carving few-shot subsets out of a larger draw.
    nn::Batch head(Eigen::Index k) const {
        if (k > count()) throw UsageError("dataset head: not enough samples");
        return nn::Batch{X.leftCols(k), Y.leftCols(k)};
    }
};

namespace detail {

template <typename T>
void write_pod(std::ofstream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& is, T& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace detail

// Columnar binary container; the round trip is bit-exact.
inline void save_dataset(const std::string& path, const EnvironmentDataset& ds) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw UsageError("save_dataset: cannot open " + path);
    os.write("FSDS", 4);
    detail::write_pod(os, ds.meta.version);
    detail::write_pod(os, static_cast<std::uint32_t>(ds.meta.task));
    detail::write_pod(os, ds.meta.k_sub);
    detail::write_pod(os, ds.meta.pilot_count);
    const std::uint64_t count = static_cast<std::uint64_t>(ds.count());
    const std::uint64_t x_dim = static_cast<std::uint64_t>(ds.X.rows());
    const std::uint64_t y_dim = static_cast<std::uint64_t>(ds.Y.rows());
    detail::write_pod(os, count);
    detail::write_pod(os, x_dim);
    detail::write_pod(os, y_dim);
    os.write(reinterpret_cast<const char*>(ds.X.data()), static_cast<std::streamsize>(sizeof(double) * x_dim * count));
    os.write(reinterpret_cast<const char*>(ds.Y.data()), static_cast<std::streamsize>(sizeof(double) * y_dim * count));
    if (!os) throw UsageError("save_dataset: write failed for " + path);
}

inline EnvironmentDataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw UsageError("load_dataset: cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FSDS", 4) != 0) throw ConfigError("load_dataset: bad magic in " + path);
    EnvironmentDataset ds;
    std::uint32_t task = 0;
    detail::read_pod(is, ds.meta.version);
    detail::read_pod(is, task);
    detail::read_pod(is, ds.meta.k_sub);
    detail::read_pod(is, ds.meta.pilot_count);
    if (ds.meta.version != 1) throw ConfigError("load_dataset: unsupported version");
    if (task > 1) throw ConfigError("load_dataset: unknown task kind");
    ds.meta.task = static_cast<TaskKind>(task);
    std::uint64_t count = 0, x_dim = 0, y_dim = 0;
    detail::read_pod(is, count);
    detail::read_pod(is, x_dim);
    detail::read_pod(is, y_dim);
    ds.X.resize(static_cast<Eigen::Index>(x_dim), static_cast<Eigen::Index>(count));
    ds.Y.resize(static_cast<Eigen::Index>(y_dim), static_cast<Eigen::Index>(count));
    is.read(reinterpret_cast<char*>(ds.X.data()), static_cast<std::streamsize>(sizeof(double) * x_dim * count));
    is.read(reinterpret_cast<char*>(ds.Y.data()), static_cast<std::streamsize>(sizeof(double) * y_dim * count));
    if (!is) throw ConfigError("load_dataset: truncated file " + path);
    return ds;
}

}  // namespace fsadapt
