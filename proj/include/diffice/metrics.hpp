#pragma once

// Validity (FR, MAD, BKL), oracle (MQD, per-structure QD) and realism
// (Frechet feature distance, feature cosine) metrics over counterfactual
// records, plus the report tables built from them.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "diffice/guidance.hpp"
#include "diffice/models.hpp"
#include "json.hpp"

namespace diffice::metrics {

/// Classifier SP-probability of an input and of its counterfactual.
struct ScorePair {
    double p_orig = 0.0;
    double p_cf = 0.0;
};

/// Argmax convention: p_SP = 0.5 counts as NSP.
inline bool classified_sp(double p_sp) { return p_sp > 0.5; }

/// Flipped / eligible, where eligible inputs are classified NSP.
double flip_ratio(std::span<const ScorePair> pairs);
/// Mean |p_orig - p_cf| over eligible pairs.
double mad(std::span<const ScorePair> pairs);

/// KL(onehot(target) || p) for a discrete distribution p, with a 1e-12 floor.
double kl_onehot(std::span<const double> p, std::size_t target);
/// 1 - exp(-KL(onehot(SP) || f(x_cf))); the single place the remap is defined.
double bkl_value(double p_cf);
/// Mean bkl_value over eligible pairs.
double bkl(std::span<const ScorePair> pairs);

/// (1/N) sum I(QS_O(x) < 0.5) (QS_O(x_cf) - QS_O(x)).
double mqd(std::span<const models::OracleScores> orig, std::span<const models::OracleScores> cf);

struct QdSummary {
    double th = 0.0, csp = 0.0, fp = 0.0;  // mean QS(x_cf) - QS(x) per structure over all records
};
QdSummary qd_summary(std::span<const models::OracleScores> orig, std::span<const models::OracleScores> cf);

using FeatureSet = std::vector<std::vector<double>>;

/// ||mu_A - mu_B||^2 + Tr(S_A + S_B - 2 (S_A^1/2 S_B S_A^1/2)^1/2) with
/// unbiased covariances; +1e-6 I is added when a set has fewer than d + 1
/// samples. Throws with fewer than 2 samples in either set.
double frechet_feature_distance(const FeatureSet& a, const FeatureSet& b);

/// Mean over pairs of cos(a_i, b_i).
double mean_feature_cosine(const FeatureSet& a, const FeatureSet& b);

struct IterationRow {
    std::string method;
    int iteration = 0;
    std::size_t n = 0, eligible = 0, valid = 0, confident_oracle = 0;
    double fr = 0.0, mad = 0.0, bkl = 0.0, mqd = 0.0;
    QdSummary qd;
    std::optional<double> frechet;  // needs >= 2 valid counterfactuals
    std::optional<double> cosine;   // needs >= 1 valid counterfactual
};

struct QdPoint {
    std::uint64_t image_id = 0;
    double qs_orig = 0.0, qs_cf = 0.0;
};

struct Efficiency {
    double mean_batch_seconds = 0.0, std_batch_seconds = 0.0, total_hours = 0.0;
    std::size_t batches = 0;
};

struct MetricsReport {
    std::string method;
    std::vector<IterationRow> rows;  // one per iteration
    std::vector<QdPoint> qd_th, qd_csp, qd_fp;  // final iteration
    std::optional<Efficiency> efficiency;       // wall clock; kept out of the canonical report

    const IterationRow& final_row() const { return rows.back(); }
    nlohmann::json to_json() const;
};

/// Scores of one record under f, the oracle and F_eval, per iteration.
struct RecordScores {
    std::uint64_t image_id = 0;
    double p_orig = 0.0;
    models::OracleScores oracle_orig;
    std::vector<double> features_orig;
    std::vector<double> p_cf;
    std::vector<models::OracleScores> oracle_cf;
    std::vector<std::vector<double>> features_cf;
};

/// Validity metrics use records whose input is classified NSP; realism
/// metrics use those whose counterfactual is also classified SP.
MetricsReport report_from_scores(const std::string& method, std::span<const RecordScores> scores);

/// Recomputes every score from the stored images with the given models.
MetricsReport build_report(std::span<const guidance::CounterfactualRecord> records,
                           const models::QualityClassifier<float>& f, const models::Oracle<float>& oracle,
                           const models::FeatureNet<float>& eval_features);

Efficiency efficiency_from(std::span<const double> batch_seconds);

/// Table rows for several methods: method,iteration,N,eligible,valid,FR,MAD,BKL,MQD,FD,cosine,...
std::string rows_csv(std::span<const MetricsReport> reports);
/// image_id,qs_orig,qs_cf,qd for one structure.
std::string qd_csv(std::span<const QdPoint> points);

/// Writes report.json, table.csv and qd_{th,csp,fp}.csv; efficiency.json
/// when timings are present. Returns the hash of report.json.
std::string save_report(const MetricsReport& r, const std::filesystem::path& dir);

}  // namespace diffice::metrics
