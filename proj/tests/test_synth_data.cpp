#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "bevdiff/kv.hpp"
#include "bevdiff/synth.hpp"

using namespace bevdiff;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / ("bevdiff_test_" + name)).string();
}

std::string read_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Independent rasterizer: rotate the half extents into corners, then a convex polygon
// point test through edge cross products.
bool polygon_contains(const GtBox& b, double x, double y) {
    const double c = std::cos(b.heading), s = std::sin(b.heading);
    const double hu[2] = {0.5 * b.w * c, 0.5 * b.w * s};
    const double hv[2] = {-0.5 * b.h * s, 0.5 * b.h * c};
    const double px[4] = {b.cx - hu[0] - hv[0], b.cx + hu[0] - hv[0], b.cx + hu[0] + hv[0], b.cx - hu[0] + hv[0]};
    const double py[4] = {b.cy - hu[1] - hv[1], b.cy + hu[1] - hv[1], b.cy + hu[1] + hv[1], b.cy - hu[1] + hv[1]};
    for (int k = 0; k < 4; ++k) {
        const int n = (k + 1) % 4;
        const double cross = (px[n] - px[k]) * (y - py[k]) - (py[n] - py[k]) * (x - px[k]);
        if (cross < 0) return false;
    }
    return true;
}

int oracle_cells(const GtBox& b, int G) {
    int n = 0;
    for (int i = 0; i < G; ++i)
        for (int j = 0; j < G; ++j) n += polygon_contains(b, j + 0.5, i + 0.5);
    return n;
}

SynthConfig noiseless() {
    SynthConfig c;
    c.cam_sigma = 0;
    c.cam_jitter = 0;
    c.cam_blur = false;
    c.lidar_sigma = 0;
    c.lidar_sparsify = 0;
    return c;
}

double plane_sum(const Tensor& t, int channel) {
    const std::size_t plane = t.size() / t.dim(0);
    double s = 0;
    for (std::size_t p = 0; p < plane; ++p) s += t[channel * plane + p];
    return s;
}

}  // namespace

TEST(GenerateScene, DeterministicPerSeed) {
    const SynthConfig cfg;
    EXPECT_EQ(generate_scene(42, cfg), generate_scene(42, cfg));
    EXPECT_NE(generate_scene(42, cfg), generate_scene(43, cfg));
    EXPECT_EQ(generate_dataset(7, 5, cfg), generate_dataset(7, 5, cfg));
    EXPECT_EQ(generate_dataset(7, 3, cfg).scenes[2], generate_scene(9, cfg));
}

TEST(GenerateScene, BoxesInsideGridAndCountsInRange) {
    const SynthConfig cfg;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const Scene s = generate_scene(seed, cfg);
        EXPECT_GE(static_cast<int>(s.boxes.size()), cfg.min_boxes);
        EXPECT_LE(static_cast<int>(s.boxes.size()), cfg.max_boxes);
        EXPECT_EQ(s.class_maps.shape(), (Shape{3, 32, 32}));
        for (const auto& b : s.boxes) {
            EXPECT_TRUE(b.cls == 0 || b.cls == 1);
            EXPECT_GE(b.w, cfg.min_size);
            EXPECT_LE(b.w, cfg.max_size);
            for (const auto& p : box_corners(b)) {
                EXPECT_GE(p[0], 0.0);
                EXPECT_LT(p[0], 32.0);
                EXPECT_GE(p[1], 0.0);
                EXPECT_LT(p[1], 32.0);
            }
        }
    }
}

TEST(GenerateScene, RasterMatchesPolygonOracleWithoutOverlap) {
    const SynthConfig cfg;
    const int G = cfg.grid;
    double cells_total = 0, area_total = 0;
    for (std::uint64_t seed = 100; seed < 300; ++seed) {
        const Scene s = generate_scene(seed, cfg);
        int expect = 0;
        for (const auto& b : s.boxes) {
            expect += oracle_cells(b, G);
            area_total += b.w * b.h;
        }
        const int got = static_cast<int>(plane_sum(s.class_maps, kClassA) + plane_sum(s.class_maps, kClassB));
        EXPECT_EQ(got, expect) << "seed " << seed;
        cells_total += got;

        // Cell-by-cell agreement with the oracle, and no cell claimed by two boxes.
        for (int i = 0; i < G; ++i)
            for (int j = 0; j < G; ++j) {
                int owners = 0;
                bool a = false, b = false;
                for (const auto& box : s.boxes)
                    if (polygon_contains(box, j + 0.5, i + 0.5)) {
                        ++owners;
                        (box.cls == 0 ? a : b) = true;
                    }
                EXPECT_LE(owners, 1);
                EXPECT_EQ(s.class_maps[(1 * G + i) * G + j], a ? 1.0 : 0.0);
                EXPECT_EQ(s.class_maps[(2 * G + i) * G + j], b ? 1.0 : 0.0);
            }
    }
    // Cell-centre sampling estimates the box area without bias.
    EXPECT_NEAR(cells_total / area_total, 1.0, 0.03);
}

TEST(GenerateScene, RoadMapIsBand) {
    const Scene s = generate_scene(5, SynthConfig{});
    const double road_cells = plane_sum(s.class_maps, kRoad);
    EXPECT_GT(road_cells, 0.0);
    for (double v : s.class_maps.data()) EXPECT_TRUE(v == 0.0 || v == 1.0);
}

TEST(GenerateScene, PlacementFailureYieldsFewerBoxes) {
    SynthConfig cfg;
    cfg.grid = 8;
    cfg.min_size = cfg.max_size = 5.0;
    cfg.min_boxes = cfg.max_boxes = 5;
    cfg.placement_retries = 5;
    const Scene s = generate_scene(1, cfg);
    EXPECT_LT(s.boxes.size(), 5u);
}

TEST(RenderModalities, FixedSeedIsBitIdentical) {
    const SynthConfig cfg;
    const Scene s = generate_scene(3, cfg);
    Rng a(11), b(11), c(12);
    const ModalityPair pa = render_modalities(s, cfg, a);
    EXPECT_EQ(pa, render_modalities(s, cfg, b));
    EXPECT_NE(pa, render_modalities(s, cfg, c));
    EXPECT_EQ(pa.cam.shape(), (Shape{6, 32, 32}));
    EXPECT_EQ(pa.lidar.shape(), (Shape{6, 32, 32}));
}

TEST(RenderModalities, NoiselessRendersAreExact) {
    const SynthConfig cfg = noiseless();
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Scene s = generate_scene(seed, cfg);
        Rng rng(seed);
        const ModalityPair f = render_modalities(s, cfg, rng);
        const std::size_t plane = 32 * 32;
        for (std::size_t p = 0; p < plane; ++p) {
            const double occ = std::max(s.class_maps[kClassA * plane + p], s.class_maps[kClassB * plane + p]);
            EXPECT_EQ(f.cam[1 * plane + p], s.class_maps[kClassA * plane + p]);
            EXPECT_EQ(f.cam[2 * plane + p], s.class_maps[kClassB * plane + p]);
            EXPECT_EQ(f.lidar[p], occ);
            for (int c = 1; c < cfg.c_in; ++c) EXPECT_EQ(f.lidar[c * plane + p] == 0.0, occ == 0.0);
        }
    }
}

TEST(RenderModalities, LidarCannotTellClassesApart) {
    const SynthConfig cfg = noiseless();
    Scene s = generate_scene(17, cfg);
    Scene swapped = s;
    for (auto& b : swapped.boxes) b.cls = 1 - b.cls;
    const std::size_t plane = 32 * 32;
    for (std::size_t p = 0; p < plane; ++p) std::swap(swapped.class_maps[plane + p], swapped.class_maps[2 * plane + p]);
    Rng a(1), b(1);
    const ModalityPair f = render_modalities(s, cfg, a), g = render_modalities(swapped, cfg, b);
    EXPECT_EQ(f.lidar, g.lidar);
    EXPECT_NE(f.cam, g.cam);
}

TEST(RenderModalities, CameraAndLidarOccupancyCorrelate) {
    const SynthConfig cfg;
    double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    std::size_t n = 0;
    const Dataset d = generate_dataset(500, 100, cfg);
    const std::size_t plane = 32 * 32;
    for (const auto& f : d.features) {
        for (std::size_t p = 0; p < plane; ++p) {
            // Binary occupancy from each modality, thresholded at half the nominal object amplitude
            // (object colour channels for the camera, the first return channel for lidar).
            const double x = f.cam[1 * plane + p] + f.cam[2 * plane + p] > 0.5 ? 1.0 : 0.0;
            const double y = f.lidar[p] > 0.5 ? 1.0 : 0.0;
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
            ++n;
        }
        for (double v : f.cam.data()) ASSERT_TRUE(std::isfinite(v));
        for (double v : f.lidar.data()) ASSERT_TRUE(std::isfinite(v));
    }
    const double cov = sxy / n - sx / n * sy / n;
    const double r = cov / std::sqrt((sxx / n - sx * sx / n / n) * (syy / n - sy * sy / n / n));
    EXPECT_GT(r, 0.5);
}

TEST(RenderModalities, ValuesAreFloatRepresentable) {
    const Dataset d = generate_dataset(1, 3, SynthConfig{});
    for (const auto& f : d.features)
        for (double v : f.cam.data()) EXPECT_EQ(static_cast<double>(static_cast<float>(v)), v);
}

TEST(SynthConfig, ValidationAndKeyRoundTrip) {
    SynthConfig c;
    c.grid = 30;
    EXPECT_THROW(validate(c), ConfigError);
    c = SynthConfig{};
    c.lidar_sparsify = 1.5;
    EXPECT_THROW(validate(c), ConfigError);
    c = SynthConfig{};
    c.max_size = 30;
    EXPECT_THROW(validate(c), ConfigError);

    SynthConfig a;
    a.cam_sigma = 0.37;
    a.cam_blur = false;
    a.max_boxes = 3;
    SynthConfig b;
    apply_kv(b, to_kv(a));
    EXPECT_EQ(a, b);
    EXPECT_THROW(apply_kv(b, {{"synth.colour", "1"}}), ConfigError);
}

TEST(DatasetIo, RoundTripIsBitExact) {
    const Dataset d = generate_dataset(77, 6, SynthConfig{});
    const std::string path = temp_path("roundtrip.bin");
    save_dataset(path, d);
    const Dataset back = load_dataset(path);
    EXPECT_EQ(back, d);
    const std::string again = temp_path("roundtrip2.bin");
    save_dataset(again, back);
    EXPECT_EQ(read_bytes(again), read_bytes(path));
    std::remove(path.c_str());
    std::remove(again.c_str());
}

TEST(DatasetIo, FileSizeIsHeaderPlusDeclaredArrays) {
    const SynthConfig cfg;
    const Dataset d = generate_dataset(3000, 1000, cfg);
    const Container c = dataset_to_container(d);
    std::size_t payload = 0;
    const std::size_t grid = static_cast<std::size_t>(cfg.grid) * cfg.grid;
    for (const auto& s : d.scenes) payload += 4 * (6 * s.boxes.size() + 4 + 3 * grid + 2 * cfg.c_in * grid);
    const std::string path = temp_path("size.bin");
    save_dataset(path, d);
    EXPECT_EQ(std::filesystem::file_size(path), c.header().size() + payload);
    EXPECT_EQ(c.payload_bytes(), payload);
    std::remove(path.c_str());
}

TEST(DatasetIo, HeaderLayout) {
    const Container c = dataset_to_container(generate_dataset(5, 1, SynthConfig{}));
    const std::string h = c.header();
    EXPECT_EQ(h.rfind("BEVDIFF 1\nkind dataset\n", 0), 0u);
    EXPECT_NE(h.find("meta scenes 1\n"), std::string::npos);
    EXPECT_NE(h.find("meta seed 5\n"), std::string::npos);
    EXPECT_NE(h.find("array scene0.cam f32 3 6 32 32\n"), std::string::npos);
    EXPECT_EQ(h.substr(h.size() - 4), "end\n");
}

TEST(DatasetIo, CorruptionsAreRejectedWithFieldAndOffset) {
    const std::string bytes = serialize_container(dataset_to_container(generate_dataset(9, 2, SynthConfig{})));
    auto error_of = [](const std::string& b) {
        try {
            dataset_from_container(parse_container(b, "dataset"));
        } catch (const ContainerError& e) {
            return std::string(e.what());
        }
        return std::string();
    };

    std::string bad = bytes;
    bad[0] = 'X';
    EXPECT_NE(error_of(bad).find("magic"), std::string::npos);

    bad = bytes;
    bad.replace(0, 9, "BEVDIFF 7");
    EXPECT_NE(error_of(bad).find("version"), std::string::npos);

    const std::string truncated = error_of(bytes.substr(0, bytes.size() - 10));
    EXPECT_NE(truncated.find("truncated"), std::string::npos);
    EXPECT_NE(truncated.find("byte offset"), std::string::npos);

    const std::string header_cut = error_of(bytes.substr(0, 30));
    EXPECT_NE(header_cut.find("byte offset"), std::string::npos);

    EXPECT_NE(error_of(bytes + "xx").find("trailing"), std::string::npos);

    bad = bytes;
    bad.replace(bad.find("kind dataset"), 12, "kind weights");
    EXPECT_NE(error_of(bad).find("kind"), std::string::npos);

    EXPECT_THROW(load_dataset(temp_path("does_not_exist.bin")), std::runtime_error);
}
