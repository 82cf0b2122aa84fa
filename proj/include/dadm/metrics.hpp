#pragma once

#include <vector>

namespace dadm {

/// Operating point for "live if score >= threshold".
struct RocPoint {
    double far = 0.0;  // spoofs accepted / spoofs
    double frr = 0.0;  // lives rejected / lives
    double threshold = 0.0;
};

/// One point per distinct score (ascending), plus +inf (far 0, frr 1).
/// Throws ConfigError unless both classes are present.
std::vector<RocPoint> roc_curve(const std::vector<double>& scores, const std::vector<int>& labels);

/// Trapezoidal area under (far, 1 - frr).
double auc_from_roc(const std::vector<RocPoint>& roc);

/// Threshold of the ROC point with the smallest (far + frr) / 2; the lowest
/// such threshold on ties.
double min_hter_threshold(const std::vector<double>& scores, const std::vector<int>& labels);

struct Metrics {
    double auc = 0.0;
    double hter = 0.0;
    double far = 0.0;
    double frr = 0.0;
    double threshold = 0.0;
    /// Equal-error rate of these scores, diagnostic only.
    double eer = 0.0;
    std::vector<RocPoint> roc;
};

/// HTER, FAR and FRR at `threshold`; AUC and EER from the ROC of these scores.
Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels, double threshold);
/// Same with the threshold chosen by min_hter_threshold on these scores.
Metrics compute_metrics(const std::vector<double>& scores, const std::vector<int>& labels);

}  // namespace dadm
