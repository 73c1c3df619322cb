#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "wnet/preprocess.hpp"
#include "wnet/tensor.hpp"

namespace wnet {

// ---- dataset manifest ----

struct ManifestEntry {
    std::string id;
    std::string image_path;
    std::string od_mask_path;  // empty when unavailable
    std::string ex_mask_path;
    std::vector<std::string> tags;

    bool has_od() const { return !od_mask_path.empty(); }
    bool has_ex() const { return !ex_mask_path.empty(); }
};

struct DatasetManifest {
    std::string name;
    std::filesystem::path base_dir;  // paths resolve relative to this
    std::vector<ManifestEntry> entries;
};

inline const char* kManifestHeader = "id,image,od_mask,ex_mask,tags";

namespace detail {

inline std::vector<std::string> split_csv_row(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::istringstream is(line);
    while (std::getline(is, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.push_back("");
    return fields;
}

}  // namespace detail

// CSV manifest with a fixed header. Referenced files must exist at load
// time; failures carry the offending row number.
inline DatasetManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("manifest: cannot open " + path.string());
    DatasetManifest m;
    m.name = path.stem().string();
    m.base_dir = path.parent_path();

    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("manifest: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != kManifestHeader)
        throw std::runtime_error("manifest: expected header '" +
                                 std::string(kManifestHeader) + "', got '" + line + "'");

    std::set<std::string> seen;
    int row = 1;
    bool any_mask = false;
    while (std::getline(is, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = detail::split_csv_row(line);
        if (fields.size() != 5)
            throw std::runtime_error("manifest row " + std::to_string(row) + ": expected 5 fields, got " +
                                     std::to_string(fields.size()));
        ManifestEntry e;
        e.id = fields[0];
        e.image_path = fields[1];
        e.od_mask_path = fields[2];
        e.ex_mask_path = fields[3];
        if (!fields[4].empty()) {
            std::istringstream ts(fields[4]);
            std::string tag;
            while (std::getline(ts, tag, ';')) e.tags.push_back(tag);
        }
        if (e.id.empty() || e.image_path.empty())
            throw std::runtime_error("manifest row " + std::to_string(row) +
                                     ": id and image are required");
        if (!seen.insert(e.id).second)
            throw std::runtime_error("manifest row " + std::to_string(row) +
                                     ": duplicate id '" + e.id + "'");
        for (const std::string* p : {&e.image_path, &e.od_mask_path, &e.ex_mask_path}) {
            if (p->empty()) continue;
            const auto full = m.base_dir / *p;
            if (!std::filesystem::exists(full))
                throw std::runtime_error("manifest row " + std::to_string(row) +
                                         ": missing file " + full.string());
        }
        any_mask = any_mask || e.has_od() || e.has_ex();
        m.entries.push_back(std::move(e));
    }
    if (m.entries.empty()) throw std::runtime_error("manifest: no entries");
    if (!any_mask) throw std::runtime_error("manifest: no entry provides any mask");
    return m;
}

inline void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("manifest: cannot write " + path.string());
    os << kManifestHeader << "\n";
    for (const auto& e : m.entries) {
        os << e.id << ',' << e.image_path << ',' << e.od_mask_path << ','
           << e.ex_mask_path << ',';
        for (std::size_t i = 0; i < e.tags.size(); ++i)
            os << (i ? ";" : "") << e.tags[i];
        os << "\n";
    }
}

enum class Task { OD, EX, Both };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::OD: return "od";
        case Task::EX: return "ex";
        default: return "both";
    }
}

inline Task task_from_name(const std::string& s) {
    if (s == "od") return Task::OD;
    if (s == "ex") return Task::EX;
    if (s == "both") return Task::Both;
    throw std::invalid_argument("unknown task '" + s + "'");
}

struct TaskFilter {
    std::vector<ManifestEntry> usable;
    std::vector<std::string> skipped_ids;
};

// Entries lacking a mask the task needs are skipped (and reported), not an
// error; a manifest with nothing usable is.
inline TaskFilter filter_for_task(const DatasetManifest& m, Task task) {
    TaskFilter out;
    for (const auto& e : m.entries) {
        const bool ok = (task == Task::OD && e.has_od()) ||
                        (task == Task::EX && e.has_ex()) ||
                        (task == Task::Both && e.has_od() && e.has_ex());
        if (ok)
            out.usable.push_back(e);
        else
            out.skipped_ids.push_back(e.id);
    }
    if (out.usable.empty())
        throw std::runtime_error("no manifest entry provides the masks required by task '" +
                                 std::string(task_name(task)) + "'");
    return out;
}

// ---- synthetic scenes ----

struct SyntheticSceneSpec {
    std::int64_t image_size = 64;
    double disc_axis_lo = 7, disc_axis_hi = 11;
    double disc_intensity_lo = 195, disc_intensity_hi = 245;
    int exudate_count_lo = 3, exudate_count_hi = 7;
    double exudate_radius_lo = 1.4, exudate_radius_hi = 3.2;
    double exudate_intensity_lo = 185, exudate_intensity_hi = 245;
    double background_level = 95;
    double texture_amplitude = 12;
    int vessel_count = 3;

    // Ranges proportional to a 64 px reference frame.
    static SyntheticSceneSpec scaled_default(std::int64_t size) {
        SyntheticSceneSpec s;
        s.image_size = size;
        const double f = static_cast<double>(size) / 64.0;
        s.disc_axis_lo *= f;
        s.disc_axis_hi *= f;
        s.exudate_radius_lo = std::max(1.2, s.exudate_radius_lo * f);
        s.exudate_radius_hi = std::max(2.0, s.exudate_radius_hi * f);
        return s;
    }
};

struct Ellipse {
    double cy = 0, cx = 0, ay = 1, ax = 1, theta = 0;

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double u = std::cos(theta) * dx + std::sin(theta) * dy;
        const double v = -std::sin(theta) * dx + std::cos(theta) * dy;
        return (u * u) / (ax * ax) + (v * v) / (ay * ay) <= 1.0;
    }
};

struct SyntheticScene {
    std::int64_t size = 0;
    Ellipse disc;
    double disc_intensity = 220;
    std::vector<Ellipse> blobs;
    std::vector<double> blob_intensities;
    std::vector<std::array<double, 6>> vessels;  // quadratic bezier (y0,x0,y1,x1,y2,x2)
    double brightness = 0;                       // shared disc/exudate offset
    std::uint64_t noise_seed = 0;
};

inline Tensor<float> rasterize_ellipse(const Ellipse& e, std::int64_t size) {
    auto m = Tensor<float>::zeros({size, size});
    for (std::int64_t y = 0; y < size; ++y)
        for (std::int64_t x = 0; x < size; ++x)
            if (e.contains(static_cast<double>(y), static_cast<double>(x)))
                m.data()[y * size + x] = 1.0f;
    return m;
}

template <typename Rng>
SyntheticScene draw_scene(const SyntheticSceneSpec& spec, Rng& rng) {
    const std::int64_t s = spec.image_size;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    SyntheticScene scene;
    scene.size = s;
    scene.noise_seed = rng();

    auto in_range = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

    // disc fully inside the frame
    const double ax = in_range(spec.disc_axis_lo, spec.disc_axis_hi);
    const double ay = in_range(0.85 * ax, 1.15 * ax);
    const double margin = std::max(ax, ay) + 2.0;
    if (2 * margin >= static_cast<double>(s))
        throw std::runtime_error("synthetic: disc cannot fit in image of size " +
                                 std::to_string(s));
    scene.disc = {in_range(margin, static_cast<double>(s) - margin),
                  in_range(margin, static_cast<double>(s) - margin), ay, ax,
                  in_range(0, M_PI)};
    scene.brightness = in_range(-15.0, 15.0);
    scene.disc_intensity =
        std::min(250.0, in_range(spec.disc_intensity_lo, spec.disc_intensity_hi) +
                            scene.brightness);

    std::uniform_int_distribution<int> count_dist(spec.exudate_count_lo,
                                                  spec.exudate_count_hi);
    const int blob_count = count_dist(rng);
    for (int b = 0; b < blob_count; ++b) {
        bool placed = false;
        for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
            const double r = in_range(spec.exudate_radius_lo, spec.exudate_radius_hi);
            if (2.0 * (r + 1.0) >= static_cast<double>(s)) continue;
            Ellipse e{in_range(r + 1, static_cast<double>(s) - r - 1),
                      in_range(r + 1, static_cast<double>(s) - r - 1),
                      in_range(0.8 * r, 1.2 * r), r, in_range(0, M_PI)};
            const double dy = e.cy - scene.disc.cy, dx = e.cx - scene.disc.cx;
            const double clearance =
                std::max(scene.disc.ax, scene.disc.ay) + std::max(e.ax, e.ay) + 2.0;
            if (std::sqrt(dy * dy + dx * dx) <= clearance) continue;
            bool hits_other = false;
            for (const auto& other : scene.blobs) {
                const double oy = e.cy - other.cy, ox = e.cx - other.cx;
                if (std::sqrt(oy * oy + ox * ox) <=
                    std::max(e.ax, e.ay) + std::max(other.ax, other.ay) + 1.0) {
                    hits_other = true;
                    break;
                }
            }
            if (hits_other) continue;
            scene.blobs.push_back(e);
            scene.blob_intensities.push_back(
                std::min(250.0, in_range(spec.exudate_intensity_lo,
                                         spec.exudate_intensity_hi) +
                                    scene.brightness));
            placed = true;
        }
        if (!placed)
            throw std::runtime_error("synthetic: exudate blob cannot fit (size " +
                                     std::to_string(s) + ", " +
                                     std::to_string(blob_count) + " blobs)");
    }

    for (int v = 0; v < spec.vessel_count; ++v) {
        const double side = unit(rng);
        auto edge_point = [&](double t) -> std::array<double, 2> {
            const double e = t * static_cast<double>(s);
            switch (static_cast<int>(side * 4) % 4) {
                case 0: return {0.0, e};
                case 1: return {static_cast<double>(s) - 1, e};
                case 2: return {e, 0.0};
                default: return {e, static_cast<double>(s) - 1};
            }
        };
        auto p0 = edge_point(unit(rng));
        std::array<double, 2> p2 = {in_range(0, static_cast<double>(s) - 1),
                                    in_range(0, static_cast<double>(s) - 1)};
        std::array<double, 2> p1 = {in_range(0, static_cast<double>(s) - 1),
                                    in_range(0, static_cast<double>(s) - 1)};
        scene.vessels.push_back({p0[0], p0[1], p1[0], p1[1], p2[0], p2[1]});
    }
    return scene;
}

inline ImageRecord render_scene(const SyntheticScene& scene, const SyntheticSceneSpec& spec,
                                const std::string& id) {
    const std::int64_t s = scene.size;
    ImageRecord rec;
    rec.id = id;
    rec.rgb = Tensor<float>::zeros({3, s, s});
    rec.source_h = s;
    rec.source_w = s;

    // low-frequency value-noise background in a dark reddish palette
    const std::int64_t grid = std::max<std::int64_t>(2, s / 8) + 1;
    std::mt19937_64 nrng(scene.noise_seed);
    std::uniform_real_distribution<double> noise(-1.0, 1.0);
    std::vector<double> coarse(static_cast<std::size_t>(grid * grid));
    for (auto& v : coarse) v = noise(nrng);
    auto texture_at = [&](std::int64_t y, std::int64_t x) {
        const double gy = static_cast<double>(y) / static_cast<double>(s - 1) *
                          static_cast<double>(grid - 1);
        const double gx = static_cast<double>(x) / static_cast<double>(s - 1) *
                          static_cast<double>(grid - 1);
        const std::int64_t y0 = static_cast<std::int64_t>(gy), x0 = static_cast<std::int64_t>(gx);
        const std::int64_t y1 = std::min(y0 + 1, grid - 1), x1 = std::min(x0 + 1, grid - 1);
        const double fy = gy - static_cast<double>(y0), fx = gx - static_cast<double>(x0);
        return (1 - fy) * ((1 - fx) * coarse[static_cast<std::size_t>(y0 * grid + x0)] +
                           fx * coarse[static_cast<std::size_t>(y0 * grid + x1)]) +
               fy * ((1 - fx) * coarse[static_cast<std::size_t>(y1 * grid + x0)] +
                     fx * coarse[static_cast<std::size_t>(y1 * grid + x1)]);
    };
    const std::int64_t hw = s * s;
    for (std::int64_t y = 0; y < s; ++y)
        for (std::int64_t x = 0; x < s; ++x) {
            const double t = texture_at(y, x) * spec.texture_amplitude;
            const double base = spec.background_level;
            rec.rgb.data()[0 * hw + y * s + x] = static_cast<float>(1.45 * base + t);
            rec.rgb.data()[1 * hw + y * s + x] = static_cast<float>(0.85 * base + t);
            rec.rgb.data()[2 * hw + y * s + x] = static_cast<float>(0.55 * base + 0.5 * t);
        }

    // dark vessel-like curves
    for (const auto& v : scene.vessels) {
        const int steps = static_cast<int>(3 * s);
        for (int i = 0; i <= steps; ++i) {
            const double t = static_cast<double>(i) / static_cast<double>(steps);
            const double omt = 1.0 - t;
            const double y = omt * omt * v[0] + 2 * omt * t * v[2] + t * t * v[4];
            const double x = omt * omt * v[1] + 2 * omt * t * v[3] + t * t * v[5];
            const std::int64_t yi = std::llround(y), xi = std::llround(x);
            for (std::int64_t dy = 0; dy <= 1; ++dy)
                for (std::int64_t dx = 0; dx <= 1; ++dx) {
                    const std::int64_t py = yi + dy, px = xi + dx;
                    if (py < 0 || py >= s || px < 0 || px >= s) continue;
                    for (int c = 0; c < 3; ++c) {
                        auto& pix = rec.rgb.data()[c * hw + py * s + px];
                        pix = static_cast<float>(std::max(0.0, pix - 45.0));
                    }
                }
        }
    }

    // bright structures share a yellowish palette; size tells them apart
    auto paint = [&](const Ellipse& e, double intensity) {
        for (std::int64_t y = 0; y < s; ++y)
            for (std::int64_t x = 0; x < s; ++x)
                if (e.contains(static_cast<double>(y), static_cast<double>(x))) {
                    rec.rgb.data()[0 * hw + y * s + x] = static_cast<float>(intensity);
                    rec.rgb.data()[1 * hw + y * s + x] =
                        static_cast<float>(0.88 * intensity);
                    rec.rgb.data()[2 * hw + y * s + x] =
                        static_cast<float>(0.30 * intensity);
                }
    };
    paint(scene.disc, scene.disc_intensity);
    rec.od_mask = rasterize_ellipse(scene.disc, s);
    rec.ex_mask = Tensor<float>::zeros({s, s});
    for (std::size_t b = 0; b < scene.blobs.size(); ++b) {
        paint(scene.blobs[b], scene.blob_intensities[b]);
        auto blob_mask = rasterize_ellipse(scene.blobs[b], s);
        for (std::int64_t i = 0; i < hw; ++i)
            if (blob_mask.data()[i] == 1.0f) rec.ex_mask.data()[i] = 1.0f;
    }

    for (auto& v : rec.rgb.data())
        v = std::clamp(v, 0.0f, 255.0f);
    return rec;
}

// Deterministic synthetic dataset: record k is a pure function of
// (spec, seed, k).
inline std::vector<ImageRecord> generate_synthetic(const SyntheticSceneSpec& spec,
                                                   int n, std::uint64_t seed) {
    if (n < 1) throw std::invalid_argument("generate_synthetic: n must be >= 1");
    std::vector<ImageRecord> out;
    for (int k = 0; k < n; ++k) {
        std::mt19937_64 rng(seed * 0x9e3779b97f4a7c15ull + static_cast<std::uint64_t>(k) + 1);
        auto scene = draw_scene(spec, rng);
        char id[32];
        std::snprintf(id, sizeof(id), "synth_%04d", k);
        out.push_back(render_scene(scene, spec, id));
    }
    return out;
}

}  // namespace wnet
