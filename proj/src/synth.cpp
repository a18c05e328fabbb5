#include "bevdiff/synth.hpp"

#include <cmath>
#include <iostream>
#include <numbers>
#include <stdexcept>

#include "bevdiff/kv.hpp"

namespace bevdiff {

namespace {

constexpr int kMaxChannels = 8;

// Camera colour of each segmentation class (road, A, B) and the lidar return signature.
constexpr double kCamColor[3][kMaxChannels] = {
    {0.8, 0.0, 0.0, 0.4, 0.0, 0.2, 0.3, 0.0},
    {0.0, 1.0, 0.0, 0.0, 0.5, 0.3, 0.0, 0.3},
    {0.0, 0.0, 1.0, 0.5, 0.0, 0.3, 0.3, 0.3},
};
constexpr double kLidarSignature[kMaxChannels] = {1.0, 0.6, 0.3, 0.8, 0.5, 0.2, 0.4, 0.7};

// Through a volatile so the narrowing survives optimization (GCC 11 at -O3 folds the plain round trip).
double f32(double v) {
    volatile float f = static_cast<float>(v);
    return static_cast<double>(f);
}

bool on_road(const Road& r, double x, double y) {
    return std::abs(-(x - r.px) * std::sin(r.angle) + (y - r.py) * std::cos(r.angle)) <= r.half_width;
}

void raster_box(Tensor& maps, int channel, const GtBox& b) {
    const int H = maps.dim(1), W = maps.dim(2);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            if (box_contains(b, j + 0.5, i + 0.5)) maps[(static_cast<std::size_t>(channel) * H + i) * W + j] = 1.0;
}

Tensor rasterize(const Road& road, const std::vector<GtBox>& boxes, int H, int W) {
    Tensor maps(Shape{SynthConfig::kSegClasses, H, W});
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j)
            if (on_road(road, j + 0.5, i + 0.5)) maps[static_cast<std::size_t>(i) * W + j] = 1.0;
    for (const auto& b : boxes) raster_box(maps, 1 + b.cls, b);
    return maps;
}

// 3x3 binomial blur per channel, zero padding.
Tensor blur(const Tensor& m) {
    const int C = m.dim(0), H = m.dim(1), W = m.dim(2);
    static constexpr double k[3] = {0.25, 0.5, 0.25};
    Tensor out(m.shape());
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                double s = 0.0;
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        const int y = i + di, x = j + dj;
                        if (y < 0 || y >= H || x < 0 || x >= W) continue;
                        s += k[di + 1] * k[dj + 1] * m[(static_cast<std::size_t>(c) * H + y) * W + x];
                    }
                out[(static_cast<std::size_t>(c) * H + i) * W + j] = s;
            }
    return out;
}

}  // namespace

void validate(const SynthConfig& cfg) {
    if (cfg.grid < 4 || cfg.grid % 4 != 0) throw ConfigError("synth.grid must be a positive multiple of 4, got " + std::to_string(cfg.grid));
    if (cfg.c_in < 1 || cfg.c_in > kMaxChannels) throw ConfigError("synth.c_in must be in [1, 8]");
    if (cfg.min_boxes < 1 || cfg.max_boxes < cfg.min_boxes) throw ConfigError("synth box counts must satisfy 1 <= min_boxes <= max_boxes");
    if (!(cfg.min_size > 0) || cfg.max_size < cfg.min_size) throw ConfigError("synth box sizes must satisfy 0 < min_size <= max_size");
    if (cfg.max_size * std::numbers::sqrt2 >= cfg.grid) throw ConfigError("synth.max_size too large for the grid");
    if (!(cfg.road_min_width >= 0) || cfg.road_max_width < cfg.road_min_width) throw ConfigError("synth road widths invalid");
    if (!(cfg.cam_sigma >= 0) || !(cfg.lidar_sigma >= 0) || !(cfg.cam_jitter >= 0)) throw ConfigError("synth noise levels must be >= 0");
    if (!(cfg.lidar_sparsify >= 0 && cfg.lidar_sparsify <= 1)) throw ConfigError("synth.lidar_sparsify must be in [0, 1]");
    if (cfg.placement_retries < 1) throw ConfigError("synth.placement_retries must be >= 1");
}

std::map<std::string, std::string> to_kv(const SynthConfig& c) {
    return {
        {"synth.grid", std::to_string(c.grid)},
        {"synth.c_in", std::to_string(c.c_in)},
        {"synth.min_boxes", std::to_string(c.min_boxes)},
        {"synth.max_boxes", std::to_string(c.max_boxes)},
        {"synth.min_size", format_double(c.min_size)},
        {"synth.max_size", format_double(c.max_size)},
        {"synth.road_min_width", format_double(c.road_min_width)},
        {"synth.road_max_width", format_double(c.road_max_width)},
        {"synth.cam_sigma", format_double(c.cam_sigma)},
        {"synth.cam_jitter", format_double(c.cam_jitter)},
        {"synth.cam_blur", format_bool(c.cam_blur)},
        {"synth.lidar_sigma", format_double(c.lidar_sigma)},
        {"synth.lidar_sparsify", format_double(c.lidar_sparsify)},
        {"synth.placement_retries", std::to_string(c.placement_retries)},
    };
}

void apply_kv(SynthConfig& c, const std::map<std::string, std::string>& kv) {
    for (const auto& [k, v] : kv) {
        if (k.rfind("synth.", 0) != 0) continue;
        if (k == "synth.grid") c.grid = parse_int(k, v);
        else if (k == "synth.c_in") c.c_in = parse_int(k, v);
        else if (k == "synth.min_boxes") c.min_boxes = parse_int(k, v);
        else if (k == "synth.max_boxes") c.max_boxes = parse_int(k, v);
        else if (k == "synth.min_size") c.min_size = parse_double(k, v);
        else if (k == "synth.max_size") c.max_size = parse_double(k, v);
        else if (k == "synth.road_min_width") c.road_min_width = parse_double(k, v);
        else if (k == "synth.road_max_width") c.road_max_width = parse_double(k, v);
        else if (k == "synth.cam_sigma") c.cam_sigma = parse_double(k, v);
        else if (k == "synth.cam_jitter") c.cam_jitter = parse_double(k, v);
        else if (k == "synth.cam_blur") c.cam_blur = parse_bool(k, v);
        else if (k == "synth.lidar_sigma") c.lidar_sigma = parse_double(k, v);
        else if (k == "synth.lidar_sparsify") c.lidar_sparsify = parse_double(k, v);
        else if (k == "synth.placement_retries") c.placement_retries = parse_int(k, v);
        else throw ConfigError("unknown config key '" + k + "'");
    }
}

bool box_contains(const GtBox& b, double x, double y) {
    const double dx = x - b.cx, dy = y - b.cy;
    const double c = std::cos(b.heading), s = std::sin(b.heading);
    const double u = dx * c + dy * s;
    const double v = -dx * s + dy * c;
    return std::abs(u) <= 0.5 * b.w && std::abs(v) <= 0.5 * b.h;
}

std::array<std::array<double, 2>, 4> box_corners(const GtBox& b) {
    const double c = std::cos(b.heading), s = std::sin(b.heading);
    std::array<std::array<double, 2>, 4> out{};
    const double su[4] = {-1, 1, 1, -1}, sv[4] = {-1, -1, 1, 1};
    for (int k = 0; k < 4; ++k) {
        const double u = 0.5 * b.w * su[k], v = 0.5 * b.h * sv[k];
        out[k] = {b.cx + u * c - v * s, b.cy + u * s + v * c};
    }
    return out;
}

Scene generate_scene(std::uint64_t seed, const SynthConfig& cfg) {
    validate(cfg);
    Rng rng = make_stream(seed, Stream::Data);
    const int G = cfg.grid;
    Scene s;
    s.seed = seed;
    s.height = s.width = G;
    s.road.px = f32(rng.uniform(0.25 * G, 0.75 * G));
    s.road.py = f32(rng.uniform(0.25 * G, 0.75 * G));
    s.road.angle = f32(rng.uniform(0.0, std::numbers::pi));
    s.road.half_width = f32(0.5 * rng.uniform(cfg.road_min_width, cfg.road_max_width));

    const int wanted = rng.uniform_int(cfg.min_boxes, cfg.max_boxes);
    std::vector<char> blocked(static_cast<std::size_t>(G) * G, 0);
    for (int b = 0; b < wanted; ++b) {
        bool placed = false;
        for (int attempt = 0; attempt < cfg.placement_retries && !placed; ++attempt) {
            GtBox box;
            box.w = f32(rng.uniform(cfg.min_size, cfg.max_size));
            box.h = f32(rng.uniform(cfg.min_size, cfg.max_size));
            box.heading = f32(rng.uniform(-0.25 * std::numbers::pi, 0.25 * std::numbers::pi));
            box.cls = rng.bernoulli(0.5) ? 1 : 0;
            const double r = 0.5 * std::hypot(box.w, box.h);
            box.cx = f32(rng.uniform(r, G - r));
            box.cy = f32(rng.uniform(r, G - r));
            bool in_bounds = true;
            for (const auto& p : box_corners(box))
                in_bounds = in_bounds && p[0] >= 0 && p[0] < G && p[1] >= 0 && p[1] < G;
            if (!in_bounds) continue;
            std::vector<int> cells;
            bool clear = true;
            for (int i = 0; i < G && clear; ++i)
                for (int j = 0; j < G; ++j)
                    if (box_contains(box, j + 0.5, i + 0.5)) {
                        if (blocked[static_cast<std::size_t>(i) * G + j]) {
                            clear = false;
                            break;
                        }
                        cells.push_back(i * G + j);
                    }
            if (!clear || cells.empty()) continue;
            // Block the footprint plus a one-cell margin so objects never touch.
            for (int cell : cells)
                for (int di = -1; di <= 1; ++di)
                    for (int dj = -1; dj <= 1; ++dj) {
                        const int y = cell / G + di, x = cell % G + dj;
                        if (y >= 0 && y < G && x >= 0 && x < G) blocked[static_cast<std::size_t>(y) * G + x] = 1;
                    }
            s.boxes.push_back(box);
            placed = true;
        }
        if (!placed) {
            std::clog << "synth: scene seed " << seed << ": placed " << s.boxes.size() << " of " << wanted
                      << " boxes after " << cfg.placement_retries << " retries\n";
            break;
        }
    }
    s.class_maps = rasterize(s.road, s.boxes, G, G);
    return s;
}

ModalityPair render_modalities(const Scene& scene, const SynthConfig& cfg, Rng& rng) {
    validate(cfg);
    const int H = scene.height, W = scene.width, C = cfg.c_in;

    Road road = scene.road;
    road.px += rng.uniform(-cfg.cam_jitter, cfg.cam_jitter);
    road.py += rng.uniform(-cfg.cam_jitter, cfg.cam_jitter);
    std::vector<GtBox> seen = scene.boxes;
    for (auto& b : seen) {
        b.cx += rng.uniform(-cfg.cam_jitter, cfg.cam_jitter);
        b.cy += rng.uniform(-cfg.cam_jitter, cfg.cam_jitter);
    }
    Tensor maps = rasterize(road, seen, H, W);
    if (cfg.cam_blur) maps = blur(maps);

    const std::size_t plane = static_cast<std::size_t>(H) * W;
    ModalityPair out{Tensor(Shape{C, H, W}), Tensor(Shape{C, H, W})};
    for (int c = 0; c < C; ++c)
        for (std::size_t p = 0; p < plane; ++p) {
            double v = 0.0;
            for (int k = 0; k < SynthConfig::kSegClasses; ++k) v += kCamColor[k][c] * maps[k * plane + p];
            out.cam[c * plane + p] = v;
        }
    for (auto& v : out.cam.data()) v = f32(v + cfg.cam_sigma * rng.normal());

    const double cy = 0.5 * H, cx = 0.5 * W, r_max = std::hypot(cx, cy);
    std::vector<double> ret(plane, 0.0);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            const std::size_t p = static_cast<std::size_t>(i) * W + j;
            const bool occupied = scene.class_maps[kClassA * plane + p] > 0.5 || scene.class_maps[kClassB * plane + p] > 0.5;
            const double drop = cfg.lidar_sparsify * std::hypot(j + 0.5 - cx, i + 0.5 - cy) / r_max;
            const bool kept = !rng.bernoulli(drop);
            ret[p] = occupied && kept ? 1.0 : 0.0;
        }
    for (int c = 0; c < C; ++c)
        for (std::size_t p = 0; p < plane; ++p)
            out.lidar[c * plane + p] = f32(kLidarSignature[c] * ret[p] + cfg.lidar_sigma * rng.normal());
    return out;
}

Dataset generate_dataset(std::uint64_t seed, int n_scenes, const SynthConfig& cfg) {
    validate(cfg);
    if (n_scenes < 1) throw ConfigError("scene count must be >= 1");
    Dataset d;
    d.cfg = cfg;
    d.seed = seed;
    for (int i = 0; i < n_scenes; ++i) {
        const std::uint64_t s = seed + static_cast<std::uint64_t>(i);
        d.scenes.push_back(generate_scene(s, cfg));
        Rng render = make_stream(s, Stream::Render);
        d.features.push_back(render_modalities(d.scenes.back(), cfg, render));
    }
    return d;
}

namespace {

Array tensor_array(const std::string& name, const Tensor& t) {
    Array a{name, DType::F32, {}, t.values()};
    for (int d : t.shape()) a.dims.push_back(d);
    return a;
}

Tensor array_tensor(const Array& a, const Shape& expect) {
    Shape s(a.dims.begin(), a.dims.end());
    if (s != expect)
        throw ContainerError("array '" + a.name + "' has shape " + to_string(s) + ", expected " + to_string(expect));
    return Tensor(s, a.values);
}

}  // namespace

Container dataset_to_container(const Dataset& d) {
    Container c;
    c.kind = "dataset";
    c.meta = to_kv(d.cfg);
    c.meta["seed"] = std::to_string(d.seed);
    c.meta["scenes"] = std::to_string(d.size());
    c.meta["grid_h"] = std::to_string(d.cfg.grid);
    c.meta["grid_w"] = std::to_string(d.cfg.grid);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const std::string p = "scene" + std::to_string(i) + ".";
        const Scene& s = d.scenes[i];
        Array boxes{p + "boxes", DType::F32, {static_cast<std::int64_t>(s.boxes.size()), 6}, {}};
        for (const auto& b : s.boxes)
            boxes.values.insert(boxes.values.end(), {b.cx, b.cy, b.w, b.h, b.heading, static_cast<double>(b.cls)});
        c.arrays.push_back(std::move(boxes));
        c.arrays.push_back(Array{p + "road", DType::F32, {4}, {s.road.px, s.road.py, s.road.angle, s.road.half_width}});
        c.arrays.push_back(tensor_array(p + "class_maps", s.class_maps));
        c.arrays.push_back(tensor_array(p + "cam", d.features[i].cam));
        c.arrays.push_back(tensor_array(p + "lidar", d.features[i].lidar));
    }
    return c;
}

Dataset dataset_from_container(const Container& c) {
    Dataset d;
    std::map<std::string, std::string> synth;
    for (const auto& [k, v] : c.meta)
        if (k.rfind("synth.", 0) == 0) synth[k] = v;
    try {
        apply_kv(d.cfg, synth);
        d.seed = parse_u64("seed", c.meta_value("seed"));
        const int n = parse_int("scenes", c.meta_value("scenes"));
        const int G = d.cfg.grid;
        if (parse_int("grid_h", c.meta_value("grid_h")) != G || parse_int("grid_w", c.meta_value("grid_w")) != G)
            throw ContainerError("header field grid_h/grid_w disagrees with synth.grid");
        for (int i = 0; i < n; ++i) {
            const std::string p = "scene" + std::to_string(i) + ".";
            Scene s;
            s.seed = d.seed + static_cast<std::uint64_t>(i);
            s.height = s.width = G;
            const Array& boxes = c.array(p + "boxes");
            if (boxes.dims.size() != 2 || boxes.dims[1] != 6) throw ContainerError("array '" + boxes.name + "' must be [n, 6]");
            for (std::int64_t b = 0; b < boxes.dims[0]; ++b) {
                const double* v = boxes.values.data() + 6 * b;
                s.boxes.push_back(GtBox{v[0], v[1], v[2], v[3], v[4], static_cast<int>(v[5])});
            }
            const Array& road = c.array(p + "road");
            if (road.count() != 4) throw ContainerError("array '" + road.name + "' must hold 4 values");
            s.road = Road{road.values[0], road.values[1], road.values[2], road.values[3]};
            s.class_maps = array_tensor(c.array(p + "class_maps"), {SynthConfig::kSegClasses, G, G});
            d.features.push_back(ModalityPair{array_tensor(c.array(p + "cam"), {d.cfg.c_in, G, G}),
                                              array_tensor(c.array(p + "lidar"), {d.cfg.c_in, G, G})});
            d.scenes.push_back(std::move(s));
        }
    } catch (const ConfigError& e) {
        throw ContainerError(std::string("dataset header: ") + e.what());
    }
    return d;
}

void save_dataset(const std::string& path, const Dataset& d) { write_container(path, dataset_to_container(d)); }

Dataset load_dataset(const std::string& path) {
    try {
        return dataset_from_container(read_container(path, "dataset"));
    } catch (const ContainerError& e) {
        const std::string msg = e.what();
        if (msg.rfind(path, 0) == 0) throw;
        throw ContainerError(path + ": " + msg);
    }
}

Tensor fused_features(const ModalityPair& f) {
    const Tensor cam = f.cam.reshaped({1, f.cam.dim(0), f.cam.dim(1), f.cam.dim(2)});
    const Tensor lidar = f.lidar.reshaped({1, f.lidar.dim(0), f.lidar.dim(1), f.lidar.dim(2)});
    return concat_channels(cam, lidar);
}

}  // namespace bevdiff
