#pragma once

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "irnlm/common.hpp"
#include "irnlm/io.hpp"

namespace irnlm::encoding {

// Dense voxel grid; voxel v maps to (x, y, z) with x fastest.
struct GridGeometry {
    int nx = 1, ny = 1, nz = 1;
    double sx_mm = 1.0, sy_mm = 1.0, sz_mm = 1.0;

    int n_voxels() const { return nx * ny * nz; }

    int index(int x, int y, int z) const { return x + nx * (y + ny * z); }

    void coords(int v, int& x, int& y, int& z) const {
        x = v % nx;
        y = (v / nx) % ny;
        z = v / (nx * ny);
    }

    bool operator==(const GridGeometry& o) const {
        return nx == o.nx && ny == o.ny && nz == o.nz && sx_mm == o.sx_mm && sy_mm == o.sy_mm &&
               sz_mm == o.sz_mm;
    }

    io::json to_json() const {
        return io::json{{"grid_shape", {nx, ny, nz}}, {"voxel_size_mm", {sx_mm, sy_mm, sz_mm}}};
    }

    static GridGeometry from_json(const io::json& j) {
        GridGeometry g;
        const auto shape = j.at("grid_shape");
        const auto size = j.at("voxel_size_mm");
        if (shape.size() != 3 || size.size() != 3)
            throw DataError("grid_shape and voxel_size_mm must have 3 entries");
        g.nx = shape[0].get<int>();
        g.ny = shape[1].get<int>();
        g.nz = shape[2].get<int>();
        g.sx_mm = size[0].get<double>();
        g.sy_mm = size[1].get<double>();
        g.sz_mm = size[2].get<double>();
        if (g.nx < 1 || g.ny < 1 || g.nz < 1) throw DataError("grid dimensions must be >= 1");
        if (g.sx_mm <= 0 || g.sy_mm <= 0 || g.sz_mm <= 0)
            throw DataError("voxel sizes must be positive");
        return g;
    }
};

struct BoldRun {
    Eigen::MatrixXd data;  // scans x voxels
    double tr_s = 2.0;
    GridGeometry grid;
    int run_id = 1;

    void save(const std::filesystem::path& path) const {
        io::write_raw_f32(path, data);
        io::json side = grid.to_json();
        side["tr_s"] = tr_s;
        side["n_scans"] = data.rows();
        side["n_voxels"] = data.cols();
        side["run_id"] = run_id;
        io::write_json(path.string() + ".json", side);
    }

    static BoldRun load(const std::filesystem::path& path) {
        const io::json side = io::read_json(path.string() + ".json");
        BoldRun run;
        run.grid = GridGeometry::from_json(side);
        run.tr_s = side.at("tr_s").get<double>();
        run.run_id = side.at("run_id").get<int>();
        const auto n_scans = side.at("n_scans").get<Eigen::Index>();
        const auto n_voxels = side.at("n_voxels").get<Eigen::Index>();
        if (n_voxels != run.grid.n_voxels())
            throw DataError(path.string() + ": n_voxels does not match grid_shape");
        run.data = io::read_raw_f32(path, n_scans, n_voxels);
        return run;
    }
};

// Correlation map (or any per-voxel scalar map) with its grid.
struct RMap {
    Eigen::VectorXd values;
    GridGeometry grid;
    io::json meta = io::json::object();

    void save(const std::filesystem::path& path) const {
        io::write_raw_f32(path, values);
        io::json side = grid.to_json();
        side["n_voxels"] = values.size();
        side["meta"] = meta;
        io::write_json(path.string() + ".json", side);
    }

    static RMap load(const std::filesystem::path& path) {
        const io::json side = io::read_json(path.string() + ".json");
        RMap m;
        m.grid = GridGeometry::from_json(side);
        m.meta = side.value("meta", io::json::object());
        const auto n = side.at("n_voxels").get<Eigen::Index>();
        if (n != m.grid.n_voxels()) throw DataError(path.string() + ": n_voxels does not match grid");
        m.values = io::read_raw_f32(path, n, 1).col(0);
        return m;
    }
};

// Canonical double-gamma impulse response: a gamma-density response
// minus a later, smaller gamma-density undershoot, peak-normalized.
struct HrfParams {
    double response_shape = 6.0;
    double undershoot_shape = 16.0;
    double undershoot_ratio = 1.0 / 6.0;
};

struct HrfKernel {
    std::vector<double> samples;
    double dt_s = 0.1;
};

inline double gamma_pdf_unit_scale(double t, double shape) {
    if (t <= 0.0) return 0.0;
    return std::exp((shape - 1.0) * std::log(t) - t - std::lgamma(shape));
}

inline HrfKernel hrf_kernel(double dt_s = 0.1, double duration_s = 32.0, HrfParams hp = {}) {
    if (dt_s <= 0.0) throw ConfigError("hrf dt must be positive");
    if (duration_s <= dt_s) throw ConfigError("hrf duration must exceed dt");
    HrfKernel k;
    k.dt_s = dt_s;
    const int n = static_cast<int>(std::floor(duration_s / dt_s)) + 1;
    k.samples.resize(static_cast<std::size_t>(n));
    double peak = 0.0;
    for (int i = 0; i < n; ++i) {
        const double t = i * dt_s;
        const double v = gamma_pdf_unit_scale(t, hp.response_shape) -
                         hp.undershoot_ratio * gamma_pdf_unit_scale(t, hp.undershoot_shape);
        k.samples[static_cast<std::size_t>(i)] = v;
        peak = std::max(peak, v);
    }
    if (peak <= 0.0) throw NumericError("hrf kernel has no positive peak");
    for (double& v : k.samples) v /= peak;
    return k;
}

struct Event {
    double time_s;
    double amplitude;
};

inline std::vector<Event> read_events_csv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open: " + path.string());
    std::vector<Event> events;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        if (line_no == 1 && line.rfind("time_s", 0) == 0) continue;
        const std::size_t comma = line.find(',');
        if (comma == std::string::npos)
            throw DataError(path.string() + " line " + std::to_string(line_no) +
                            ": expected time_s,amplitude");
        try {
            events.push_back({std::stod(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
        } catch (const std::exception&) {
            throw DataError(path.string() + " line " + std::to_string(line_no) + ": bad number");
        }
    }
    return events;
}

inline void write_events_csv(const std::filesystem::path& path, const std::vector<Event>& events) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os << "time_s,amplitude\n";
    os.precision(9);
    for (const auto& e : events) os << e.time_s << ',' << e.amplitude << '\n';
    if (!os) throw DataError("write failed: " + path.string());
}

namespace detail {

// Convolve sparse events with the kernel on the dt grid and read the
// result out at scan times.
inline Eigen::VectorXd convolve_and_sample(const std::vector<Event>& events, const HrfKernel& k,
                                           double tr_s, int n_scans) {
    if (tr_s <= 0.0) throw ConfigError("tr must be positive");
    if (n_scans < 1) throw ConfigError("need at least one scan");
    const double duration = n_scans * tr_s;
    const auto grid_len = static_cast<std::size_t>(std::llround(duration / k.dt_s)) + 1;
    std::vector<double> grid(grid_len, 0.0);
    for (const auto& e : events) {
        if (e.time_s < 0.0 || e.time_s > duration)
            throw DataError("event at " + std::to_string(e.time_s) + " s outside run of " +
                            std::to_string(duration) + " s");
        const auto i0 = static_cast<std::size_t>(std::llround(e.time_s / k.dt_s));
        for (std::size_t j = 0; j < k.samples.size() && i0 + j < grid_len; ++j)
            grid[i0 + j] += e.amplitude * k.samples[j];
    }
    Eigen::VectorXd out(n_scans);
    for (int s = 0; s < n_scans; ++s) {
        const auto idx = static_cast<std::size_t>(std::llround(s * tr_s / k.dt_s));
        out(s) = grid[idx];
    }
    return out;
}

inline void standardize_columns(Eigen::MatrixXd& m) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        const double mean = m.col(c).mean();
        m.col(c).array() -= mean;
        const double sd = std::sqrt(m.col(c).squaredNorm() / static_cast<double>(m.rows()));
        if (sd > 1e-12)
            m.col(c) /= sd;
        else
            m.col(c).setZero();
    }
}

}  // namespace detail

// One design column per feature: the feature value of every token is
// placed as an impulse at the token's event time, convolved with the
// kernel and sampled at the scan grid. Columns are standardized per run
// unless the caller needs the raw convolution.
inline Eigen::MatrixXd build_design(const Eigen::MatrixXd& features,
                                    const std::vector<double>& event_times_s, const HrfKernel& k,
                                    double tr_s, int n_scans, bool standardize = true) {
    if (features.rows() != static_cast<Eigen::Index>(event_times_s.size()))
        throw DataError("feature rows do not match event count");
    Eigen::MatrixXd design(n_scans, features.cols());
    std::vector<Event> events(event_times_s.size());
    for (Eigen::Index f = 0; f < features.cols(); ++f) {
        for (std::size_t e = 0; e < event_times_s.size(); ++e)
            events[e] = {event_times_s[e], features(static_cast<Eigen::Index>(e), f)};
        design.col(f) = detail::convolve_and_sample(events, k, tr_s, n_scans);
    }
    if (standardize) detail::standardize_columns(design);
    return design;
}

// Low-level nuisance model: acoustic energy, word-offset impulses and
// log unigram frequency, each convolved like any other regressor.
inline Eigen::MatrixXd baseline_regressors(const std::vector<Event>& acoustic_rms,
                                           const std::vector<double>& word_offsets_s,
                                           const std::vector<double>& log_word_freq,
                                           const HrfKernel& k, double tr_s, int n_scans,
                                           bool standardize = true) {
    if (word_offsets_s.size() != log_word_freq.size())
        throw DataError("word offsets and frequencies differ in length");
    Eigen::MatrixXd design(n_scans, 3);
    design.col(0) = detail::convolve_and_sample(acoustic_rms, k, tr_s, n_scans);
    std::vector<Event> events(word_offsets_s.size());
    for (std::size_t i = 0; i < word_offsets_s.size(); ++i) events[i] = {word_offsets_s[i], 1.0};
    design.col(1) = detail::convolve_and_sample(events, k, tr_s, n_scans);
    for (std::size_t i = 0; i < word_offsets_s.size(); ++i)
        events[i] = {word_offsets_s[i], log_word_freq[i]};
    design.col(2) = detail::convolve_and_sample(events, k, tr_s, n_scans);
    if (standardize) detail::standardize_columns(design);
    return design;
}

// Per-word log frequency with unseen words falling back to the rarest
// observed count.
inline std::vector<double> log_frequencies(const std::vector<std::string>& words,
                                           const std::map<std::string, std::int64_t>& counts) {
    if (counts.empty()) throw DataError("empty frequency table");
    std::int64_t min_count = std::numeric_limits<std::int64_t>::max();
    std::int64_t total = 0;
    for (const auto& [w, c] : counts) {
        if (c < 1) throw DataError("frequency counts must be >= 1");
        min_count = std::min(min_count, c);
        total += c;
    }
    std::vector<double> out;
    out.reserve(words.size());
    for (const auto& w : words) {
        auto it = counts.find(w);
        const std::int64_t c = it == counts.end() ? min_count : it->second;
        out.push_back(std::log(static_cast<double>(c) / static_cast<double>(total)));
    }
    return out;
}

struct PreprocessResult {
    BoldRun run;
    std::vector<int> zero_variance_voxels;
};

// Linear detrend then z-score each voxel; flat voxels become zero and
// are reported instead of poisoning later correlations.
inline PreprocessResult preprocess_bold(const BoldRun& in) {
    PreprocessResult out;
    out.run = in;
    const Eigen::Index n = in.data.rows();
    if (n < 3) throw DataError("need at least three scans to detrend and scale");
    Eigen::VectorXd t = Eigen::VectorXd::LinSpaced(n, 0.0, static_cast<double>(n - 1));
    const double t_mean = t.mean();
    const Eigen::VectorXd tc = t.array() - t_mean;
    const double tt = tc.squaredNorm();
    for (Eigen::Index v = 0; v < in.data.cols(); ++v) {
        Eigen::VectorXd y = in.data.col(v);
        const double y_mean = y.mean();
        const double slope = tc.dot(y) / tt;
        y = y.array() - y_mean - slope * tc.array();
        const double sd = std::sqrt(y.squaredNorm() / static_cast<double>(n));
        if (sd > 1e-12) {
            out.run.data.col(v) = y / sd;
        } else {
            out.run.data.col(v).setZero();
            out.zero_variance_voxels.push_back(static_cast<int>(v));
        }
    }
    return out;
}

inline double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    if (a.size() != b.size() || a.size() < 2) throw DataError("pearson needs two equal-length vectors");
    const double ma = a.mean(), mb = b.mean();
    const Eigen::VectorXd ca = a.array() - ma, cb = b.array() - mb;
    const double denom = std::sqrt(ca.squaredNorm() * cb.squaredNorm());
    if (denom < 1e-300) return 0.0;
    return ca.dot(cb) / denom;
}

// Closed-form ridge solution for one target.
inline Eigen::VectorXd ridge(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, double lambda) {
    if (x.rows() != y.size()) throw DataError("design rows do not match target length");
    if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
    const Eigen::MatrixXd gram =
        x.transpose() * x + lambda * Eigen::MatrixXd::Identity(x.cols(), x.cols());
    if (lambda == 0.0) {
        const Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
        if (!lu.isInvertible())
            throw NumericError("singular system: design is rank-deficient and lambda is 0");
    }
    return gram.ldlt().solve(x.transpose() * y);
}

inline std::vector<double> default_lambda_grid() {
    // 10 points, log-spaced from 1e-3 to 1e4
    std::vector<double> grid(10);
    for (int i = 0; i < 10; ++i) grid[static_cast<std::size_t>(i)] = std::pow(10.0, -3.0 + 7.0 * i / 9.0);
    return grid;
}

// All ridge solutions along a lambda grid for many targets at once,
// through one thin SVD of the design.
inline std::vector<Eigen::MatrixXd> ridge_path(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y,
                                               const std::vector<double>& lambdas) {
    if (x.rows() != y.rows()) throw DataError("design rows do not match target rows");
    Eigen::BDCSVD<Eigen::MatrixXd> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Eigen::MatrixXd uty = svd.matrixU().transpose() * y;
    const Eigen::VectorXd s = svd.singularValues();
    std::vector<Eigen::MatrixXd> betas;
    betas.reserve(lambdas.size());
    for (const double lambda : lambdas) {
        Eigen::VectorXd shrink(s.size());
        for (Eigen::Index i = 0; i < s.size(); ++i)
            shrink(i) = s(i) / (s(i) * s(i) + lambda);
        betas.push_back(svd.matrixV() * shrink.asDiagonal() * uty);
    }
    return betas;
}

struct NestedCvResult {
    RMap mean_r;                  // across folds, per voxel
    Eigen::MatrixXd r_test;       // folds x voxels
    Eigen::MatrixXi lambda_index; // folds x voxels, index into the grid
};

// Leave-one-run-out on the outer loop with the next run held out for
// per-voxel lambda selection; the winning model is evaluated untouched
// on the test run.
inline NestedCvResult nested_cv_encode(const std::vector<Eigen::MatrixXd>& designs,
                                       const std::vector<Eigen::MatrixXd>& bold,
                                       const std::vector<double>& lambda_grid,
                                       const GridGeometry& grid = GridGeometry{}) {
    const int n_runs = static_cast<int>(designs.size());
    if (n_runs < 3) throw DataError("nested cross-validation needs at least 3 runs");
    if (bold.size() != designs.size()) throw DataError("designs and bold runs differ in count");
    if (lambda_grid.empty()) throw ConfigError("empty lambda grid");
    const Eigen::Index n_voxels = bold[0].cols();
    const Eigen::Index n_features = designs[0].cols();
    for (int r = 0; r < n_runs; ++r) {
        if (designs[static_cast<std::size_t>(r)].cols() != n_features)
            throw DataError("design feature count differs across runs");
        if (bold[static_cast<std::size_t>(r)].cols() != n_voxels)
            throw DataError("voxel count differs across runs");
        if (designs[static_cast<std::size_t>(r)].rows() != bold[static_cast<std::size_t>(r)].rows())
            throw DataError("scan count differs between design and bold in one run");
    }

    NestedCvResult res;
    res.r_test.resize(n_runs, n_voxels);
    res.lambda_index.resize(n_runs, n_voxels);
    for (int test = 0; test < n_runs; ++test) {
        const int valid = (test + 1) % n_runs;
        Eigen::Index train_rows = 0;
        for (int r = 0; r < n_runs; ++r)
            if (r != test && r != valid) train_rows += designs[static_cast<std::size_t>(r)].rows();
        Eigen::MatrixXd xtr(train_rows, n_features);
        Eigen::MatrixXd ytr(train_rows, n_voxels);
        Eigen::Index at = 0;
        for (int r = 0; r < n_runs; ++r) {
            if (r == test || r == valid) continue;
            const auto& d = designs[static_cast<std::size_t>(r)];
            xtr.middleRows(at, d.rows()) = d;
            ytr.middleRows(at, d.rows()) = bold[static_cast<std::size_t>(r)];
            at += d.rows();
        }
        const std::vector<Eigen::MatrixXd> betas = ridge_path(xtr, ytr, lambda_grid);

        const auto& xv = designs[static_cast<std::size_t>(valid)];
        const auto& yv = bold[static_cast<std::size_t>(valid)];
        Eigen::VectorXd best_r = Eigen::VectorXd::Constant(n_voxels, -2.0);
        for (std::size_t li = 0; li < betas.size(); ++li) {
            const Eigen::MatrixXd pred = xv * betas[li];
            for (Eigen::Index v = 0; v < n_voxels; ++v) {
                const double r = pearson(pred.col(v), yv.col(v));
                if (r > best_r(v)) {
                    best_r(v) = r;
                    res.lambda_index(test, v) = static_cast<int>(li);
                }
            }
        }

        const auto& xt = designs[static_cast<std::size_t>(test)];
        const auto& yt = bold[static_cast<std::size_t>(test)];
        std::vector<Eigen::MatrixXd> preds(betas.size());
        for (std::size_t li = 0; li < betas.size(); ++li) preds[li] = xt * betas[li];
        for (Eigen::Index v = 0; v < n_voxels; ++v) {
            const auto li = static_cast<std::size_t>(res.lambda_index(test, v));
            res.r_test(test, v) = pearson(preds[li].col(v), yt.col(v));
        }
    }
    res.mean_r.values = res.r_test.colwise().mean();
    res.mean_r.grid = grid;
    if (grid.n_voxels() != static_cast<int>(n_voxels) && grid.n_voxels() == 1) {
        // caller did not supply a grid; fall back to a flat line of voxels
        res.mean_r.grid = GridGeometry{static_cast<int>(n_voxels), 1, 1, 1.0, 1.0, 1.0};
    } else if (grid.n_voxels() != static_cast<int>(n_voxels)) {
        throw DataError("grid voxel count does not match bold voxel count");
    }
    return res;
}

inline RMap delta_r(const RMap& full, const RMap& reduced) {
    if (!(full.grid == reduced.grid)) throw DataError("delta over maps with different grids");
    RMap out;
    out.grid = full.grid;
    out.values = full.values - reduced.values;
    out.meta = {{"kind", "delta_r"}};
    return out;
}

}  // namespace irnlm::encoding
