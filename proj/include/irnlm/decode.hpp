#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "irnlm/common.hpp"
#include "irnlm/io.hpp"

namespace irnlm::decode {

// Feature rows with a class label and the run each row came from.
struct LabeledData {
    Eigen::MatrixXd x;
    std::vector<int> labels;
    std::vector<int> run_ids;
    std::vector<std::string> class_names;  // label id -> name

    int n_rows() const { return static_cast<int>(x.rows()); }

    void validate() const {
        if (x.rows() != static_cast<Eigen::Index>(labels.size()) ||
            labels.size() != run_ids.size())
            throw DataError("labeled data rows, labels and run ids disagree");
        if (labels.empty()) throw DataError("no labeled rows");
        for (int l : labels)
            if (l < 0 || l >= static_cast<int>(class_names.size()))
                throw DataError("label id out of range");
    }
};

struct LogisticModel {
    Eigen::MatrixXd w;          // features x classes
    Eigen::RowVectorXd b;       // 1 x classes
    std::vector<int> class_ids; // column -> original label id
    bool converged = false;
    int iterations = 0;
    double final_loss = 0.0;
    double final_grad_norm = 0.0;  // reported on non-convergence
};

namespace detail {

inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& z) {
    Eigen::MatrixXd p(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        const double mx = z.row(i).maxCoeff();
        p.row(i) = (z.row(i).array() - mx).exp();
        p.row(i) /= p.row(i).sum();
    }
    return p;
}

}  // namespace detail

// Multinomial logistic regression by full-batch gradient descent with
// Armijo backtracking. Deterministic, monotone in the objective
//   mean cross-entropy + 0.5 * l2 * ||w||^2 / n.
inline LogisticModel fit_logistic(const Eigen::MatrixXd& x, const std::vector<int>& labels,
                                  double l2 = 1.0, int max_iter = 500, double tol = 1e-6) {
    if (x.rows() != static_cast<Eigen::Index>(labels.size()))
        throw DataError("rows and labels disagree");
    if (x.rows() < 1) throw DataError("no training rows");
    if (l2 < 0.0) throw ConfigError("l2 must be non-negative");

    // compact the classes that actually occur
    std::set<int> present(labels.begin(), labels.end());
    LogisticModel model;
    model.class_ids.assign(present.begin(), present.end());
    std::map<int, int> col_of;
    for (std::size_t c = 0; c < model.class_ids.size(); ++c)
        col_of[model.class_ids[c]] = static_cast<int>(c);
    const auto n = static_cast<double>(x.rows());
    const auto n_classes = static_cast<Eigen::Index>(model.class_ids.size());

    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(x.rows(), n_classes);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
        y(i, col_of.at(labels[static_cast<std::size_t>(i)])) = 1.0;

    model.w = Eigen::MatrixXd::Zero(x.cols(), n_classes);
    model.b = Eigen::RowVectorXd::Zero(n_classes);

    const auto objective = [&](const Eigen::MatrixXd& w, const Eigen::RowVectorXd& b) {
        const Eigen::MatrixXd z = (x * w).rowwise() + b;
        double ce = 0.0;
        for (Eigen::Index i = 0; i < z.rows(); ++i) {
            const double mx = z.row(i).maxCoeff();
            const double lse = mx + std::log((z.row(i).array() - mx).exp().sum());
            ce += lse - z.row(i).dot(y.row(i));
        }
        return ce / n + 0.5 * l2 * w.squaredNorm() / n;
    };

    double f = objective(model.w, model.b);
    for (int it = 0; it < max_iter; ++it) {
        const Eigen::MatrixXd p = detail::softmax_rows((x * model.w).rowwise() + model.b);
        const Eigen::MatrixXd gw = x.transpose() * (p - y) / n + l2 * model.w / n;
        const Eigen::RowVectorXd gb = (p - y).colwise().mean();
        const double g2 = gw.squaredNorm() + gb.squaredNorm();
        model.iterations = it;
        model.final_grad_norm = std::sqrt(g2);
        if (model.final_grad_norm < tol) {
            model.converged = true;
            break;
        }
        double step = 1.0;
        while (step > 1e-12) {
            const Eigen::MatrixXd w_new = model.w - step * gw;
            const Eigen::RowVectorXd b_new = model.b - step * gb;
            const double f_new = objective(w_new, b_new);
            if (f_new <= f - 1e-4 * step * g2) {
                model.w = w_new;
                model.b = b_new;
                f = f_new;
                break;
            }
            step *= 0.5;
        }
        if (step <= 1e-12) break;  // no descent direction left at double precision
    }
    model.final_loss = f;
    return model;
}

inline std::vector<int> predict(const LogisticModel& m, const Eigen::MatrixXd& x) {
    if (x.cols() != m.w.rows()) throw DataError("feature width does not match model");
    const Eigen::MatrixXd z = (x * m.w).rowwise() + m.b;
    std::vector<int> out(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
        Eigen::Index best = 0;
        z.row(i).maxCoeff(&best);
        out[static_cast<std::size_t>(i)] = m.class_ids[static_cast<std::size_t>(best)];
    }
    return out;
}

inline double accuracy(const std::vector<int>& predicted, const std::vector<int>& truth) {
    if (predicted.size() != truth.size() || truth.empty())
        throw DataError("prediction and truth lengths disagree");
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truth.size(); ++i)
        if (predicted[i] == truth[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(truth.size());
}

enum class DummyStrategy { MostFrequent, PriorSampling };

// MostFrequent predicts the training majority class everywhere.
// PriorSampling scores the expected accuracy of drawing labels from the
// training distribution: sum over classes of p_train * p_test.
inline double dummy_accuracy(const std::vector<int>& train_labels,
                             const std::vector<int>& test_labels, DummyStrategy strategy) {
    if (train_labels.empty() || test_labels.empty()) throw DataError("empty label set");
    std::map<int, std::size_t> train_counts;
    for (int l : train_labels) ++train_counts[l];
    if (strategy == DummyStrategy::MostFrequent) {
        int best_label = train_counts.begin()->first;
        std::size_t best_count = 0;
        for (const auto& [label, count] : train_counts) {
            if (count > best_count) {  // ties keep the smallest label
                best_count = count;
                best_label = label;
            }
        }
        std::size_t hits = 0;
        for (int l : test_labels)
            if (l == best_label) ++hits;
        return static_cast<double>(hits) / static_cast<double>(test_labels.size());
    }
    std::map<int, std::size_t> test_counts;
    for (int l : test_labels) ++test_counts[l];
    double acc = 0.0;
    for (const auto& [label, count] : train_counts) {
        auto it = test_counts.find(label);
        if (it == test_counts.end()) continue;
        acc += (static_cast<double>(count) / static_cast<double>(train_labels.size())) *
               (static_cast<double>(it->second) / static_cast<double>(test_labels.size()));
    }
    return acc;
}

// Monte-carlo version of the prior-sampling dummy, for validating the
// closed-form expectation.
inline double dummy_prior_sampling_simulated(const std::vector<int>& train_labels,
                                             const std::vector<int>& test_labels,
                                             std::uint64_t seed, int n_draws) {
    if (n_draws < 1) throw ConfigError("need at least one draw");
    Rng rng(seed);
    std::size_t hits = 0, total = 0;
    for (int d = 0; d < n_draws; ++d) {
        for (int truth : test_labels) {
            const auto pick = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(train_labels.size()) - 1));
            if (train_labels[pick] == truth) ++hits;
            ++total;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

struct CvResult {
    double mean_accuracy = 0.0;
    std::vector<double> fold_accuracy;
    std::vector<int> fold_runs;
    std::vector<bool> fold_converged;
};

namespace detail {

// z-score columns using training statistics; flat columns are zeroed in
// both splits
inline void scale_train_test(Eigen::MatrixXd& train, Eigen::MatrixXd& test) {
    for (Eigen::Index c = 0; c < train.cols(); ++c) {
        const double mean = train.col(c).mean();
        const double sd =
            std::sqrt((train.col(c).array() - mean).square().sum() / static_cast<double>(train.rows()));
        if (sd > 1e-12) {
            train.col(c) = (train.col(c).array() - mean) / sd;
            test.col(c) = (test.col(c).array() - mean) / sd;
        } else {
            train.col(c).setZero();
            test.col(c).setZero();
        }
    }
}

}  // namespace detail

// Leave-one-run-out decoding. Test rows whose class never occurs in
// training stay in the denominator as guaranteed misses.
inline CvResult cv_decode(const LabeledData& data, double l2 = 1.0, int max_iter = 500) {
    data.validate();
    std::set<int> runs(data.run_ids.begin(), data.run_ids.end());
    if (runs.size() < 2) throw DataError("leave-one-run-out needs at least two runs");
    CvResult res;
    for (int held : runs) {
        std::vector<Eigen::Index> train_rows, test_rows;
        for (Eigen::Index i = 0; i < data.x.rows(); ++i) {
            if (data.run_ids[static_cast<std::size_t>(i)] == held)
                test_rows.push_back(i);
            else
                train_rows.push_back(i);
        }
        if (train_rows.empty() || test_rows.empty())
            throw DataError("a cross-validation fold came out empty");
        Eigen::MatrixXd xtr(static_cast<Eigen::Index>(train_rows.size()), data.x.cols());
        Eigen::MatrixXd xte(static_cast<Eigen::Index>(test_rows.size()), data.x.cols());
        std::vector<int> ytr, yte;
        for (std::size_t i = 0; i < train_rows.size(); ++i) {
            xtr.row(static_cast<Eigen::Index>(i)) = data.x.row(train_rows[i]);
            ytr.push_back(data.labels[static_cast<std::size_t>(train_rows[i])]);
        }
        for (std::size_t i = 0; i < test_rows.size(); ++i) {
            xte.row(static_cast<Eigen::Index>(i)) = data.x.row(test_rows[i]);
            yte.push_back(data.labels[static_cast<std::size_t>(test_rows[i])]);
        }
        detail::scale_train_test(xtr, xte);
        const LogisticModel model = fit_logistic(xtr, ytr, l2, max_iter);
        res.fold_accuracy.push_back(accuracy(predict(model, xte), yte));
        res.fold_runs.push_back(held);
        res.fold_converged.push_back(model.converged);
    }
    for (double a : res.fold_accuracy) res.mean_accuracy += a;
    res.mean_accuracy /= static_cast<double>(res.fold_accuracy.size());
    return res;
}

// The same folds evaluated by a dummy instead of the probe.
inline CvResult cv_dummy(const LabeledData& data, DummyStrategy strategy) {
    data.validate();
    std::set<int> runs(data.run_ids.begin(), data.run_ids.end());
    if (runs.size() < 2) throw DataError("leave-one-run-out needs at least two runs");
    CvResult res;
    for (int held : runs) {
        std::vector<int> ytr, yte;
        for (std::size_t i = 0; i < data.labels.size(); ++i) {
            if (data.run_ids[i] == held)
                yte.push_back(data.labels[i]);
            else
                ytr.push_back(data.labels[i]);
        }
        res.fold_accuracy.push_back(dummy_accuracy(ytr, yte, strategy));
        res.fold_runs.push_back(held);
        res.fold_converged.push_back(true);
    }
    for (double a : res.fold_accuracy) res.mean_accuracy += a;
    res.mean_accuracy /= static_cast<double>(res.fold_accuracy.size());
    return res;
}

}  // namespace irnlm::decode
