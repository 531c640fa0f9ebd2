#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cs2k {

/// matrix[gt][pred] pixel counts.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t num_classes = 0)
        : n_(num_classes), counts_(num_classes * num_classes, 0) {}

    std::size_t num_classes() const { return n_; }
    std::uint64_t at(std::size_t gt, std::size_t pred) const { return counts_[gt * n_ + pred]; }
    void add(int gt, int pred);
    ConfusionMatrix& operator+=(const ConfusionMatrix& other);
    std::uint64_t total() const;

    /// TP / (TP + FP + FN); nullopt when the class never occurs in either.
    std::optional<double> iou(std::size_t cls) const;

private:
    std::size_t n_;
    std::vector<std::uint64_t> counts_;
};

/// Counts (gt, pred) pairs. Pixels whose gt is listed in `ignore_gt` are
/// skipped. Throws InputError for ids outside [0, num_classes).
ConfusionMatrix confusion(const std::vector<int>& predictions, const std::vector<int>& gt, std::size_t num_classes,
                          const std::vector<bool>* skip = nullptr);

/// Mean IoU over `group`, excluding classes with an empty union. nullopt
/// when no class of the group is present.
std::optional<double> miou(const ConfusionMatrix& matrix, const std::vector<int>& group);

struct MetricsReport {
    int step = 0;
    std::map<int, double> per_class_iou;
    std::map<int, std::uint64_t> pixel_counts;  // ground-truth pixels per class
    std::optional<double> miou_old;
    std::optional<double> miou_new;
    std::optional<double> miou_all;

    bool operator==(const MetricsReport&) const = default;
};

/// Builds the report for `step`: old = classes introduced before the step
/// (plus background from step 1 on when `background_in_old`), new = classes
/// introduced at the step (plus background at step 0).
MetricsReport make_report(int step, const ConfusionMatrix& matrix, const std::vector<int>& old_classes,
                          const std::vector<int>& new_classes, bool background_in_old = true);

/// One row per step x group: step,group,miou.
std::string reports_csv(const std::vector<MetricsReport>& reports);
std::string reports_json(const std::vector<MetricsReport>& reports);
std::vector<MetricsReport> reports_from_json(const std::string& text);
/// mIoU-vs-step line chart with one polyline per group.
std::string reports_svg(const std::vector<MetricsReport>& reports, const std::string& title);

std::string format_metric(std::optional<double> v);

} // namespace cs2k
