#pragma once

#include <cstdio>
#include <fstream>
#include <functional>
#include <string>

#include "fsadapt/common.hpp"

namespace fsadapt {

// One row of a training trace: objective plus consensus residual.
struct TraceRow {
    long iteration = 0;
    double loss = 0.0;
    double residual = 0.0;
};
using TraceSink = std::function<void(const TraceRow&)>;

// One row of an iADM trace: objective value and the step constants in force.
struct IadmTraceRow {
    long iteration = 0;
    double f_value = 0.0;
    double tau = 0.0;
    double kappa = 0.0;
    bool accepted = true;
};
using IadmTraceSink = std::function<void(const IadmTraceRow&)>;

// Shortest round-trippable decimal representation.
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

class CsvWriter {
  public:
    CsvWriter(const std::string& path, const std::string& header) : os_(path) {
        if (!os_) throw UsageError("CsvWriter: cannot open " + path);
        os_ << header << "\n";
    }

    void row(const std::string& line) { os_ << line << "\n"; }

  private:
    std::ofstream os_;
};

}  // namespace fsadapt
