#include "cs2k/scenario.hpp"

#include "cs2k/binio.hpp"
#include "cs2k/errors.hpp"
#include "cs2k/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace cs2k {

namespace {

constexpr char kMagic[] = "CS2KSCEN";
constexpr int kMinRegions = 2;
constexpr int kMaxRegions = 4;
constexpr int kMinTestImagesPerClass = 5;
constexpr int kMaxTestAttempts = 200;

struct Region {
    int cls;
    int top, left, h, w;
    bool ellipse;
};

int region_min_side(const ScenarioSpec& s) { return std::max(3, std::min(s.height, s.width) / 4); }
int region_max_side(const ScenarioSpec& s) { return std::max(region_min_side(s), std::min(s.height, s.width) / 2); }

Region random_region(const ScenarioSpec& spec, int cls, RandomSource& rng) {
    const int lo = region_min_side(spec);
    const int hi = region_max_side(spec);
    Region r{};
    r.cls = cls;
    r.h = lo + static_cast<int>(rng.below(static_cast<std::size_t>(hi - lo + 1)));
    r.w = lo + static_cast<int>(rng.below(static_cast<std::size_t>(hi - lo + 1)));
    r.top = static_cast<int>(rng.below(static_cast<std::size_t>(spec.height - r.h + 1)));
    r.left = static_cast<int>(rng.below(static_cast<std::size_t>(spec.width - r.w + 1)));
    r.ellipse = rng.uniform() < 0.5;
    return r;
}

void paint(const ScenarioSpec& spec, const Region& r, std::vector<int>& labels) {
    const double cy = r.top + (r.h - 1) / 2.0;
    const double cx = r.left + (r.w - 1) / 2.0;
    const double ry = r.h / 2.0;
    const double rx = r.w / 2.0;
    for (int y = r.top; y < r.top + r.h; ++y) {
        for (int x = r.left; x < r.left + r.w; ++x) {
            if (r.ellipse) {
                const double dy = (y - cy) / ry;
                const double dx = (x - cx) / rx;
                if (dy * dy + dx * dx > 1.0) continue;
            }
            labels[static_cast<std::size_t>(y * spec.width + x)] = r.cls;
        }
    }
}

int pick(const std::vector<int>& pool, RandomSource& rng) { return pool[rng.below(pool.size())]; }

ImageSample render(const ScenarioSpec& spec, const std::vector<std::vector<double>>& means,
                   const std::vector<Region>& regions, RandomSource& rng) {
    const auto pixels = static_cast<std::size_t>(spec.height * spec.width);
    const auto d = static_cast<std::size_t>(spec.feature_dim);
    ImageSample img;
    img.gt_full.assign(pixels, 0);
    for (const auto& r : regions) paint(spec, r, img.gt_full);
    img.features = Tensor({static_cast<std::size_t>(spec.height), static_cast<std::size_t>(spec.width), d});
    auto& f = img.features.data();
    for (std::size_t i = 0; i < pixels; ++i) {
        const auto& mu = means[static_cast<std::size_t>(img.gt_full[i])];
        for (std::size_t j = 0; j < d; ++j) f[i * d + j] = mu[j] + spec.noise_sigma * rng.normal();
    }
    return img;
}

ImageSample training_image(const ScenarioSpec& spec, const std::vector<std::vector<double>>& means,
                           const std::vector<int>& current, const std::vector<int>& earlier,
                           const std::vector<int>& later, RandomSource& rng) {
    const int count = kMinRegions + static_cast<int>(rng.below(kMaxRegions - kMinRegions + 1));
    std::vector<int> extras;
    if (!earlier.empty() && rng.uniform() < spec.overlap_probability) extras.push_back(pick(earlier, rng));
    if (!later.empty() && rng.uniform() < spec.overlap_probability) extras.push_back(pick(later, rng));
    const int own = std::max(1, count - static_cast<int>(extras.size()));

    // Other-step regions go down first so the current-step regions stay visible.
    std::vector<Region> regions;
    for (int cls : extras) regions.push_back(random_region(spec, cls, rng));
    for (int k = 0; k < own; ++k) regions.push_back(random_region(spec, pick(current, rng), rng));
    ImageSample img = render(spec, means, regions, rng);
    img.gt_step = relabel_for_step(img.gt_full, current);
    return img;
}

ImageSample test_image(const ScenarioSpec& spec, const std::vector<std::vector<double>>& means,
                       const std::vector<int>& all, RandomSource& rng) {
    const int count = kMinRegions + static_cast<int>(rng.below(kMaxRegions - kMinRegions + 1));
    std::vector<Region> regions;
    for (int k = 0; k < count; ++k) regions.push_back(random_region(spec, pick(all, rng), rng));
    ImageSample img = render(spec, means, regions, rng);
    img.gt_step = img.gt_full;
    return img;
}

bool test_set_balanced(const std::vector<ImageSample>& images, int total_classes) {
    std::vector<int> seen(static_cast<std::size_t>(total_classes) + 1, 0);
    for (const auto& img : images) {
        std::vector<bool> present(seen.size(), false);
        for (int c : img.gt_full) present[static_cast<std::size_t>(c)] = true;
        for (std::size_t c = 1; c < seen.size(); ++c) seen[c] += present[c] ? 1 : 0;
    }
    return std::all_of(seen.begin() + 1, seen.end(), [](int n) { return n >= kMinTestImagesPerClass; });
}

std::uint64_t image_index(std::uint64_t group, std::uint64_t i) { return group * 1'000'003ULL + i; }

void write_image(std::ostream& out, const ImageSample& img) {
    const auto& shape = img.features.shape();
    binio::write_u32(out, static_cast<std::uint32_t>(shape.at(0)));
    binio::write_u32(out, static_cast<std::uint32_t>(shape.at(1)));
    binio::write_u32(out, static_cast<std::uint32_t>(shape.at(2)));
    binio::write_f64s(out, img.features.data());
    binio::write_i32s(out, img.gt_full);
    binio::write_i32s(out, img.gt_step);
}

ImageSample read_image(std::istream& in) {
    const std::size_t h = binio::read_u32(in);
    const std::size_t w = binio::read_u32(in);
    const std::size_t d = binio::read_u32(in);
    ImageSample img;
    try {
        img.features = Tensor({h, w, d}, binio::read_f64s(in));
    } catch (const ConfigError&) {
        throw FormatError("image feature block does not match its shape");
    }
    img.gt_full = binio::read_i32s(in);
    img.gt_step = binio::read_i32s(in);
    if (img.gt_full.size() != h * w || img.gt_step.size() != h * w) {
        throw FormatError("image label block does not match its shape");
    }
    return img;
}

} // namespace

void ScenarioSpec::validate() const {
    if (total_classes < 1) throw ConfigError("total_classes must be >= 1");
    if (schedule.empty()) throw ConfigError("schedule must have at least one step");
    for (int n : schedule) {
        if (n < 1) throw ConfigError("every schedule entry must be >= 1");
    }
    if (std::accumulate(schedule.begin(), schedule.end(), 0) != total_classes) {
        throw ConfigError("schedule must sum to total_classes");
    }
    if (height < 8 || width < 8) throw ConfigError("image size must be at least 8x8");
    if (region_min_side(*this) > std::min(height, width)) throw ConfigError("region does not fit in the image");
    if (images_per_step < 1) throw ConfigError("images_per_step must be >= 1");
    if (test_images < 1) throw ConfigError("test_images must be >= 1");
    if (test_images * kMaxRegions < kMinTestImagesPerClass * total_classes) {
        throw ConfigError("test set too small to show every class in 5 images");
    }
    if (feature_dim < 1) throw ConfigError("feature_dim must be >= 1");
    if (!(class_separation >= 0.0) || !(noise_sigma >= 0.0)) {
        throw ConfigError("class_separation and noise_sigma must be non-negative");
    }
    if (!(overlap_probability >= 0.0 && overlap_probability <= 1.0)) {
        throw ConfigError("overlap_probability must be in [0, 1]");
    }
}

std::string ScenarioSpec::to_json() const {
    nlohmann::ordered_json j;
    j["total_classes"] = total_classes;
    j["schedule"] = schedule;
    j["images_per_step"] = images_per_step;
    j["test_images"] = test_images;
    j["image_size"] = {height, width};
    j["feature_dim"] = feature_dim;
    j["class_separation"] = class_separation;
    j["noise_sigma"] = noise_sigma;
    j["overlap_probability"] = overlap_probability;
    j["seed"] = seed;
    return j.dump();
}

ScenarioSpec ScenarioSpec::from_json(const std::string& text) {
    ScenarioSpec s;
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("scenario spec is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("scenario spec must be a JSON object");
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "total_classes") s.total_classes = value.get<int>();
            else if (key == "schedule") s.schedule = value.get<std::vector<int>>();
            else if (key == "images_per_step") s.images_per_step = value.get<int>();
            else if (key == "test_images") s.test_images = value.get<int>();
            else if (key == "image_size") {
                const auto hw = value.get<std::vector<int>>();
                if (hw.size() != 2) throw ConfigError("image_size must be [H, W]");
                s.height = hw[0];
                s.width = hw[1];
            } else if (key == "feature_dim") s.feature_dim = value.get<int>();
            else if (key == "class_separation") s.class_separation = value.get<double>();
            else if (key == "noise_sigma") s.noise_sigma = value.get<double>();
            else if (key == "overlap_probability") s.overlap_probability = value.get<double>();
            else if (key == "seed") s.seed = value.get<std::uint64_t>();
            else throw ConfigError("unknown scenario spec field '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad scenario spec field: ") + e.what());
    }
    return s;
}

std::vector<int> Scenario::classes_through(int step) const {
    std::vector<int> out;
    for (int t = 0; t <= step && t < static_cast<int>(steps.size()); ++t) {
        const auto& c = steps[static_cast<std::size_t>(t)].classes;
        out.insert(out.end(), c.begin(), c.end());
    }
    return out;
}

std::vector<int> relabel_for_step(const std::vector<int>& gt_full, const std::vector<int>& class_set) {
    if (class_set.empty()) throw InputError("relabel_for_step needs a non-empty class set");
    std::vector<int> out(gt_full.size(), 0);
    for (std::size_t i = 0; i < gt_full.size(); ++i) {
        if (std::find(class_set.begin(), class_set.end(), gt_full[i]) != class_set.end()) out[i] = gt_full[i];
    }
    return out;
}

Scenario generate_scenario(const ScenarioSpec& spec) {
    spec.validate();
    Scenario sc;
    sc.spec = spec;

    auto mean_rng = make_stream(spec.seed, Stream::scenario, image_index(0, 0));
    const auto d = static_cast<std::size_t>(spec.feature_dim);
    for (int c = 0; c <= spec.total_classes; ++c) {
        std::vector<double> v(d);
        double norm = 0.0;
        do {
            for (auto& x : v) x = mean_rng.normal();
            norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        } while (norm == 0.0);
        for (auto& x : v) x *= spec.class_separation / norm;
        sc.class_means.push_back(std::move(v));
    }

    std::vector<std::vector<int>> step_classes;
    int next = 1;
    for (int n : spec.schedule) {
        std::vector<int> cls(static_cast<std::size_t>(n));
        std::iota(cls.begin(), cls.end(), next);
        next += n;
        step_classes.push_back(std::move(cls));
    }

    const auto num_steps = step_classes.size();
    for (std::size_t t = 0; t < num_steps; ++t) {
        std::vector<int> earlier, later;
        for (std::size_t u = 0; u < num_steps; ++u) {
            auto& dst = u < t ? earlier : later;
            if (u != t) dst.insert(dst.end(), step_classes[u].begin(), step_classes[u].end());
        }
        StepDataset ds;
        ds.step = static_cast<int>(t);
        ds.classes = step_classes[t];
        ds.images.resize(static_cast<std::size_t>(spec.images_per_step));
        // Images are independent given their derived seeds.
#pragma omp parallel for schedule(static)
        for (int i = 0; i < spec.images_per_step; ++i) {
            auto rng = make_stream(spec.seed, Stream::scenario, image_index(t + 1, static_cast<std::uint64_t>(i)));
            ds.images[static_cast<std::size_t>(i)] =
                training_image(spec, sc.class_means, step_classes[t], earlier, later, rng);
        }
        sc.steps.push_back(std::move(ds));
    }

    const std::vector<int> all = sc.classes_through(static_cast<int>(num_steps) - 1);
    for (int attempt = 0;; ++attempt) {
        if (attempt == kMaxTestAttempts) throw ConfigError("could not draw a class-balanced test set");
        std::vector<ImageSample> test(static_cast<std::size_t>(spec.test_images));
        const std::uint64_t group = num_steps + 1 + static_cast<std::uint64_t>(attempt);
#pragma omp parallel for schedule(static)
        for (int i = 0; i < spec.test_images; ++i) {
            auto rng = make_stream(spec.seed, Stream::scenario, image_index(group, static_cast<std::uint64_t>(i)));
            test[static_cast<std::size_t>(i)] = test_image(spec, sc.class_means, all, rng);
        }
        if (test_set_balanced(test, spec.total_classes)) {
            sc.test_set = std::move(test);
            break;
        }
    }
    return sc;
}

PixelBatch make_batch(std::span<const ImageSample* const> images) {
    if (images.empty()) throw ConfigError("batch needs at least one image");
    const std::size_t d = images.front()->features.cols();
    std::size_t rows = 0;
    for (const auto* img : images) {
        if (img->features.cols() != d) throw ConfigError("images in a batch must share feature_dim");
        rows += img->pixels();
    }
    PixelBatch b;
    b.features = Tensor::matrix(rows, d);
    b.gt_step.reserve(rows);
    b.gt_full.reserve(rows);
    auto dst = b.features.data().begin();
    for (const auto* img : images) {
        dst = std::copy(img->features.data().begin(), img->features.data().end(), dst);
        b.gt_step.insert(b.gt_step.end(), img->gt_step.begin(), img->gt_step.end());
        b.gt_full.insert(b.gt_full.end(), img->gt_full.begin(), img->gt_full.end());
    }
    return b;
}

PixelBatch make_batch(const ImageSample& image) {
    const ImageSample* one[] = {&image};
    return make_batch(one);
}

void write_scenario(std::ostream& out, const Scenario& sc) {
    binio::write_header(out, kMagic, kScenarioVersion);
    binio::write_string(out, sc.spec.to_json());
    binio::write_u32(out, static_cast<std::uint32_t>(sc.class_means.size()));
    for (const auto& m : sc.class_means) binio::write_f64s(out, m);
    binio::write_u32(out, static_cast<std::uint32_t>(sc.steps.size()));
    for (const auto& ds : sc.steps) {
        binio::write_i32(out, ds.step);
        binio::write_i32s(out, ds.classes);
        binio::write_u32(out, static_cast<std::uint32_t>(ds.images.size()));
        for (const auto& img : ds.images) write_image(out, img);
    }
    binio::write_u32(out, static_cast<std::uint32_t>(sc.test_set.size()));
    for (const auto& img : sc.test_set) write_image(out, img);
}

Scenario read_scenario(std::istream& in) {
    const auto version = binio::read_header(in, kMagic);
    if (version != kScenarioVersion) throw FormatError("unsupported scenario version " + std::to_string(version));
    Scenario sc;
    sc.spec = ScenarioSpec::from_json(binio::read_string(in));
    const auto means = binio::read_u32(in);
    for (std::uint32_t c = 0; c < means; ++c) sc.class_means.push_back(binio::read_f64s(in));
    const auto steps = binio::read_u32(in);
    for (std::uint32_t t = 0; t < steps; ++t) {
        StepDataset ds;
        ds.step = binio::read_i32(in);
        ds.classes = binio::read_i32s(in);
        const auto n = binio::read_u32(in);
        for (std::uint32_t i = 0; i < n; ++i) ds.images.push_back(read_image(in));
        sc.steps.push_back(std::move(ds));
    }
    const auto n = binio::read_u32(in);
    for (std::uint32_t i = 0; i < n; ++i) sc.test_set.push_back(read_image(in));
    return sc;
}

void save_scenario(const std::string& path, const Scenario& scenario) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    write_scenario(out, scenario);
}

Scenario load_scenario(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open scenario file " + path);
    return read_scenario(in);
}

} // namespace cs2k
