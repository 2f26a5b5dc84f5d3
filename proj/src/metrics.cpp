#include "diffice/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "diffice/checkpoint.hpp"

namespace diffice::metrics {

namespace {

std::vector<ScorePair> eligible(std::span<const ScorePair> pairs, const char* op) {
    std::vector<ScorePair> out;
    for (const auto& p : pairs)
        if (!classified_sp(p.p_orig)) out.push_back(p);
    if (out.empty()) throw std::invalid_argument(std::string(op) + ": no input is classified NSP");
    return out;
}

Eigen::MatrixXd to_matrix(const FeatureSet& s, const char* which) {
    if (s.size() < 2) throw std::invalid_argument(std::string("frechet_feature_distance: set ") + which + " has fewer than 2 samples");
    const auto d = static_cast<Eigen::Index>(s.front().size());
    Eigen::MatrixXd m(static_cast<Eigen::Index>(s.size()), d);
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (static_cast<Eigen::Index>(s[i].size()) != d) throw std::invalid_argument("frechet_feature_distance: ragged features");
        for (Eigen::Index j = 0; j < d; ++j) m(static_cast<Eigen::Index>(i), j) = s[i][static_cast<std::size_t>(j)];
    }
    return m;
}

void moments(const Eigen::MatrixXd& x, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    mu = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
    if (x.rows() < x.cols() + 1) cov += 1e-6 * Eigen::MatrixXd::Identity(x.cols(), x.cols());
}

// Symmetric PSD square root via eigendecomposition; tiny negative
// eigenvalues from round-off are clipped.
Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

double mean_of(std::span<const double> v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << std::fixed << v;
    return os.str();
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

}  // namespace

double flip_ratio(std::span<const ScorePair> pairs) {
    const auto e = eligible(pairs, "flip_ratio");
    std::size_t flips = 0;
    for (const auto& p : e) flips += classified_sp(p.p_cf);
    return static_cast<double>(flips) / static_cast<double>(e.size());
}

double mad(std::span<const ScorePair> pairs) {
    const auto e = eligible(pairs, "mad");
    double s = 0.0;
    for (const auto& p : e) s += std::abs(p.p_orig - p.p_cf);
    return s / static_cast<double>(e.size());
}

double kl_onehot(std::span<const double> p, std::size_t target) {
    if (target >= p.size()) throw std::out_of_range("kl_onehot: target outside distribution");
    // Only the target term of sum q log(q / p) survives for a one-hot q.
    return -std::log(std::max(p[target], 1e-12));
}

double bkl_value(double p_cf) {
    const double dist[2] = {1.0 - p_cf, p_cf};
    return 1.0 - std::exp(-kl_onehot(dist, models::kSP));
}

double bkl(std::span<const ScorePair> pairs) {
    const auto e = eligible(pairs, "bkl");
    double s = 0.0;
    for (const auto& p : e) s += bkl_value(p.p_cf);
    return s / static_cast<double>(e.size());
}

double mqd(std::span<const models::OracleScores> orig, std::span<const models::OracleScores> cf) {
    if (orig.size() != cf.size()) throw std::invalid_argument("mqd: score lists differ in length");
    if (orig.empty()) throw std::invalid_argument("mqd: no records");
    double s = 0.0;
    for (std::size_t i = 0; i < orig.size(); ++i) {
        if (orig[i].overall < 0.5) s += cf[i].overall - orig[i].overall;
    }
    return s / static_cast<double>(orig.size());
}

QdSummary qd_summary(std::span<const models::OracleScores> orig, std::span<const models::OracleScores> cf) {
    if (orig.size() != cf.size() || orig.empty()) throw std::invalid_argument("qd_summary: bad score lists");
    QdSummary q;
    for (std::size_t i = 0; i < orig.size(); ++i) {
        q.th += cf[i].th - orig[i].th;
        q.csp += cf[i].csp - orig[i].csp;
        q.fp += cf[i].fp - orig[i].fp;
    }
    const double n = static_cast<double>(orig.size());
    q.th /= n;
    q.csp /= n;
    q.fp /= n;
    return q;
}

double frechet_feature_distance(const FeatureSet& a, const FeatureSet& b) {
    const auto ma = to_matrix(a, "A"), mb = to_matrix(b, "B");
    if (ma.cols() != mb.cols()) throw std::invalid_argument("frechet_feature_distance: dimension mismatch");
    Eigen::VectorXd mu_a, mu_b;
    Eigen::MatrixXd s_a, s_b;
    moments(ma, mu_a, s_a);
    moments(mb, mu_b, s_b);
    const Eigen::MatrixXd ra = sqrt_psd(s_a);
    const Eigen::MatrixXd cross = sqrt_psd(ra * s_b * ra);
    const double fd = (mu_a - mu_b).squaredNorm() + s_a.trace() + s_b.trace() - 2.0 * cross.trace();
    return std::max(fd, 0.0);
}

double mean_feature_cosine(const FeatureSet& a, const FeatureSet& b) {
    if (a.size() != b.size() || a.empty()) throw std::invalid_argument("mean_feature_cosine: need matching non-empty sets");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += models::cosine(a[i], b[i]);
    return s / static_cast<double>(a.size());
}

Efficiency efficiency_from(std::span<const double> batch_seconds) {
    Efficiency e;
    e.batches = batch_seconds.size();
    if (batch_seconds.empty()) return e;
    e.mean_batch_seconds = mean_of(batch_seconds);
    double sq = 0.0;
    for (double s : batch_seconds) sq += (s - e.mean_batch_seconds) * (s - e.mean_batch_seconds);
    e.std_batch_seconds = batch_seconds.size() > 1 ? std::sqrt(sq / static_cast<double>(batch_seconds.size() - 1)) : 0.0;
    e.total_hours = std::accumulate(batch_seconds.begin(), batch_seconds.end(), 0.0) / 3600.0;
    return e;
}

MetricsReport report_from_scores(const std::string& method, std::span<const RecordScores> scores) {
    if (scores.empty()) throw std::invalid_argument("build_report: no records");
    const std::size_t L = scores.front().p_cf.size();
    if (L == 0) throw std::invalid_argument("build_report: records have no iterations");
    for (const auto& s : scores) {
        if (s.p_cf.size() != L || s.oracle_cf.size() != L || s.features_cf.size() != L)
            throw std::invalid_argument("build_report: records have different iteration counts");
    }
    MetricsReport rep;
    rep.method = method;
    std::vector<models::OracleScores> o_orig;
    for (const auto& s : scores) o_orig.push_back(s.oracle_orig);

    for (std::size_t it = 0; it < L; ++it) {
        IterationRow row;
        row.method = method;
        row.iteration = static_cast<int>(it + 1);
        row.n = scores.size();
        std::vector<ScorePair> pairs;
        std::vector<models::OracleScores> o_cf;
        FeatureSet valid_orig, valid_cf;
        for (const auto& s : scores) {
            pairs.push_back({s.p_orig, s.p_cf[it]});
            o_cf.push_back(s.oracle_cf[it]);
            if (!classified_sp(s.p_orig)) {
                ++row.eligible;
                if (classified_sp(s.p_cf[it])) {
                    valid_orig.push_back(s.features_orig);
                    valid_cf.push_back(s.features_cf[it]);
                }
            }
            row.confident_oracle += s.oracle_orig.overall < 0.5;
        }
        row.valid = valid_cf.size();
        if (row.eligible > 0) {
            row.fr = flip_ratio(pairs);
            row.mad = mad(pairs);
            row.bkl = bkl(pairs);
        }
        row.mqd = mqd(o_orig, o_cf);
        row.qd = qd_summary(o_orig, o_cf);
        if (valid_cf.size() >= 2) row.frechet = frechet_feature_distance(valid_orig, valid_cf);
        if (!valid_cf.empty()) row.cosine = mean_feature_cosine(valid_orig, valid_cf);
        rep.rows.push_back(row);
    }
    for (const auto& s : scores) {
        rep.qd_th.push_back({s.image_id, s.oracle_orig.th, s.oracle_cf.back().th});
        rep.qd_csp.push_back({s.image_id, s.oracle_orig.csp, s.oracle_cf.back().csp});
        rep.qd_fp.push_back({s.image_id, s.oracle_orig.fp, s.oracle_cf.back().fp});
    }
    return rep;
}

MetricsReport build_report(std::span<const guidance::CounterfactualRecord> records,
                           const models::QualityClassifier<float>& f, const models::Oracle<float>& oracle,
                           const models::FeatureNet<float>& eval_features) {
    if (records.empty()) throw std::invalid_argument("build_report: no records");
    for (const auto& r : records) {
        if (r.method != records.front().method) throw std::invalid_argument("build_report: records mix methods");
        if (r.outputs.size() != records.front().outputs.size())
            throw std::invalid_argument("build_report: records have different iteration counts");
    }
    std::vector<RecordScores> scores(records.size());
    std::vector<Image> originals;
    for (const auto& r : records) originals.push_back(r.original);
    const auto p = models::predict_sp(f, originals);
    const auto o = models::oracle_scores_batch(oracle, originals);
    const auto fe = models::extract_features_batch(eval_features, originals);
    for (std::size_t i = 0; i < records.size(); ++i) {
        scores[i].image_id = records[i].image_id;
        scores[i].p_orig = p[i];
        scores[i].oracle_orig = o[i];
        scores[i].features_orig = fe[i];
    }
    for (std::size_t it = 0; it < records.front().outputs.size(); ++it) {
        std::vector<Image> cf;
        for (const auto& r : records) cf.push_back(r.outputs[it]);
        const auto pc = models::predict_sp(f, cf);
        const auto oc = models::oracle_scores_batch(oracle, cf);
        const auto fc = models::extract_features_batch(eval_features, cf);
        for (std::size_t i = 0; i < records.size(); ++i) {
            scores[i].p_cf.push_back(pc[i]);
            scores[i].oracle_cf.push_back(oc[i]);
            scores[i].features_cf.push_back(fc[i]);
        }
    }
    auto rep = report_from_scores(records.front().method, scores);

    std::vector<double> seconds;
    for (const auto& r : records) {
        if (r.seconds.empty()) {
            seconds.clear();
            break;
        }
        seconds.push_back(std::accumulate(r.seconds.begin(), r.seconds.end(), 0.0));
    }
    if (!seconds.empty()) rep.efficiency = efficiency_from(seconds);
    return rep;
}

nlohmann::json MetricsReport::to_json() const {
    nlohmann::json rows_j = nlohmann::json::array();
    for (const auto& r : rows) {
        rows_j.push_back({{"iteration", r.iteration},
                          {"counts", {{"N", r.n}, {"eligible", r.eligible}, {"valid", r.valid}, {"confident_oracle", r.confident_oracle}}},
                          {"validity", {{"FR", r.fr}, {"MAD", r.mad}, {"BKL", r.bkl}}},
                          {"oracle", {{"MQD", r.mqd}, {"QD_TH", r.qd.th}, {"QD_CSP", r.qd.csp}, {"QD_FP", r.qd.fp}}},
                          {"realism", {{"frechet_eval_distance", opt(r.frechet)}, {"mean_feature_cosine", opt(r.cosine)}}}});
    }
    return {{"method", method},
            {"notes", "frechet_eval_distance is a desk-scale analogue computed on the evaluation feature network"},
            {"iterations", rows_j}};
}

std::string rows_csv(std::span<const MetricsReport> reports) {
    std::ostringstream os;
    os << "method,iteration,N,eligible,valid,FR,MAD,BKL,MQD,QD_TH,QD_CSP,QD_FP,FD_eval,feature_cosine\n";
    for (const auto& rep : reports) {
        for (const auto& r : rep.rows) {
            os << r.method << ',' << r.iteration << ',' << r.n << ',' << r.eligible << ',' << r.valid << ','
               << fmt(r.fr) << ',' << fmt(r.mad) << ',' << fmt(r.bkl) << ',' << fmt(r.mqd) << ',' << fmt(r.qd.th)
               << ',' << fmt(r.qd.csp) << ',' << fmt(r.qd.fp) << ',' << fmt(r.frechet) << ',' << fmt(r.cosine)
               << '\n';
        }
    }
    return os.str();
}

std::string qd_csv(std::span<const QdPoint> points) {
    std::ostringstream os;
    os << "image_id,qs_orig,qs_cf,qd\n";
    for (const auto& p : points) {
        os << p.image_id << ',' << fmt(p.qs_orig) << ',' << fmt(p.qs_cf) << ',' << fmt(p.qs_cf - p.qs_orig) << '\n';
    }
    return os.str();
}

std::string save_report(const MetricsReport& r, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const std::string text = canonical_dump(r.to_json());
    write_text(dir / "report.json", text);
    write_text(dir / "table.csv", rows_csv({&r, 1}));
    write_text(dir / "qd_th.csv", qd_csv(r.qd_th));
    write_text(dir / "qd_csp.csv", qd_csv(r.qd_csp));
    write_text(dir / "qd_fp.csv", qd_csv(r.qd_fp));
    if (r.efficiency) {
        const auto& e = *r.efficiency;
        write_text(dir / "efficiency.json",
                   canonical_dump({{"mean_batch_seconds", e.mean_batch_seconds},
                                   {"std_batch_seconds", e.std_batch_seconds},
                                   {"total_hours", e.total_hours},
                                   {"batches", e.batches}}));
    }
    return sha256_hex(text);
}

}  // namespace diffice::metrics
