#include "distillfss/eval.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

#include "distillfss/flops.hpp"
#include "distillfss/image_io.hpp"
#include "distillfss/rng.hpp"

namespace distillfss {

std::string model_name(const ModelRef& model) {
    return std::holds_alternative<const Teacher*>(model) ? "teacher" : "student";
}

namespace {

MultiClassMask predict(const ModelRef& model, const Image& query, const SupportSet* support, int ways,
                       int support_batch) {
    if (const auto* t = std::get_if<const Teacher*>(&model)) {
        Episode ep(query, std::nullopt, *support);
        return multiclass_forward(**t, ep, support_batch).mask;
    }
    return student_multiclass_forward(*std::get<const Student*>(model), query, ways).mask;
}

void check_model(const ModelRef& model, const SupportSet* support, int num_classes) {
    if (std::visit([](auto* p) { return p == nullptr; }, model)) throw std::invalid_argument("no model given");
    if (std::holds_alternative<const Teacher*>(model)) {
        if (!support) throw std::invalid_argument("teacher evaluation needs a support set");
        if (support->num_classes() != num_classes) {
            throw std::invalid_argument("support set has " + std::to_string(support->num_classes()) +
                                        " classes, test set has " + std::to_string(num_classes));
        }
    } else {
        if (support) throw std::invalid_argument("student models take no support set");
        const int have = std::get<const Student*>(model)->num_classes();
        if (num_classes > have) {
            throw std::invalid_argument("student was distilled for " + std::to_string(have) + " classes, test set has " +
                                        std::to_string(num_classes));
        }
    }
}

}  // namespace

Metrics evaluate(const ModelRef& model, const Dataset& test, const SupportSet* support, int support_batch) {
    check_model(model, support, test.num_classes);
    IouAccumulator acc = IouAccumulator::for_classes(test.num_classes);
    for (const auto& item : test.items) acc.add(predict(model, item.image, support, test.num_classes, support_batch), item.mask);
    return acc.result();
}

void BenchOptions::validate() const {
    if (shots.empty() || ways.empty()) throw std::invalid_argument("bench needs at least one K and one N");
    for (int k : shots)
        if (k < 1) throw std::invalid_argument("bench: K must be positive");
    for (int n : ways)
        if (n < 1 || n > 255) throw std::invalid_argument("bench: N must be in 1..255");
    if (repeats < 20) throw std::invalid_argument("bench: repeats must be at least 20");
    if (warmup < 3) throw std::invalid_argument("bench: warmup must be at least 3");
    if (support_batch < 0) throw std::invalid_argument("bench: support_batch must be non-negative");
}

SupportSet bench_support(int shots, int ways, int image_size, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<LabeledImage> entries;
    const int count = shots * ways;
    for (int m = 0; m < count; ++m) {
        LabeledImage e;
        e.name = "bench_" + std::to_string(m);
        e.image.height = e.image.width = image_size;
        e.image.rgb.resize(static_cast<std::size_t>(image_size) * image_size * 3);
        for (auto& v : e.image.rgb) v = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
        std::vector<std::uint8_t> labels(static_cast<std::size_t>(image_size) * image_size, 0);
        const int side = image_size / 4;
        const int y0 = static_cast<int>(rng.uniform_int(0, image_size - side));
        const int x0 = static_cast<int>(rng.uniform_int(0, image_size - side));
        for (int y = y0; y < y0 + side; ++y)
            for (int x = x0; x < x0 + side; ++x)
                labels[static_cast<std::size_t>(y) * image_size + x] = static_cast<std::uint8_t>(m % ways + 1);
        e.mask = MultiClassMask(image_size, image_size, ways, std::move(labels));
        entries.push_back(std::move(e));
    }
    return SupportSet(std::move(entries), ways);
}

std::vector<BenchRecord> bench_inference(const ModelRef& model, const BenchOptions& opt) {
    opt.validate();
    if (std::visit([](auto* p) { return p == nullptr; }, model)) throw std::invalid_argument("no model given");
    if (const auto* s = std::get_if<const Student*>(&model)) {
        for (int n : opt.ways) {
            if (n > (*s)->num_classes()) {
                throw std::invalid_argument("student has " + std::to_string((*s)->num_classes()) +
                                            " classes, cannot bench N=" + std::to_string(n));
            }
        }
    }
    const bool is_teacher = std::holds_alternative<const Teacher*>(model);
    Image query = bench_support(1, 1, opt.image_size, derive_seed(opt.seed, 99))[0].image;
    struct Case {
        BenchRecord rec;
        SupportSet support;
        std::vector<double> ms;
    };
    std::vector<Case> cases;
    for (int n : opt.ways) {
        for (int k : opt.shots) {
            Case c{BenchRecord{}, bench_support(k, n, opt.image_size,
                                                derive_seed(opt.seed, static_cast<std::uint64_t>(k * 1000 + n))),
                   {}};
            c.rec.model = model_name(model);
            c.rec.k = k;
            c.rec.n = n;
            c.rec.image_size = opt.image_size;
            cases.push_back(std::move(c));
        }
    }
    auto run = [&](const Case& c) {
        return predict(model, query, is_teacher ? &c.support : nullptr, c.rec.n, opt.support_batch);
    };

    for (auto& c : cases) {
        flops::reset();
        memory::reset_peak();
        const std::size_t before = memory::current_bytes();
        run(c);
        c.rec.peak_bytes = memory::peak_bytes() - before;
        c.rec.flops = flops::total();
    }
    for (int i = 0; i < opt.warmup; ++i)
        for (const auto& c : cases) run(c);
    // Round-robin over the cases so slow drift in machine speed hits every case alike.
    for (int i = 0; i < opt.repeats; ++i) {
        for (auto& c : cases) {
            const auto t0 = std::chrono::steady_clock::now();
            run(c);
            c.ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
        }
    }
    std::vector<BenchRecord> out;
    for (auto& c : cases) {
        std::sort(c.ms.begin(), c.ms.end());
        const std::size_t mid = c.ms.size() / 2;
        c.rec.latency_ms_median = c.ms.size() % 2 ? c.ms[mid] : 0.5 * (c.ms[mid - 1] + c.ms[mid]);
        out.push_back(c.rec);
    }
    return out;
}

std::string bench_csv(std::span<const BenchRecord> records) {
    std::string out = std::string(kBenchCsvHeader) + "\n";
    char buf[256];
    for (const auto& r : records) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%d,%d,%.4f,%zu,%llu\n", r.model.c_str(), r.k, r.n, r.image_size,
                      r.latency_ms_median, r.peak_bytes, static_cast<unsigned long long>(r.flops));
        out += buf;
    }
    return out;
}

namespace {

// 3x5 bitmap glyphs; rows top to bottom, 3 bits each.
const std::map<char, std::array<const char*, 5>>& glyphs() {
    static const std::map<char, std::array<const char*, 5>> g = {
        {'0', {"111", "101", "101", "101", "111"}}, {'1', {"010", "110", "010", "010", "111"}},
        {'2', {"111", "001", "111", "100", "111"}}, {'3', {"111", "001", "111", "001", "111"}},
        {'4', {"101", "101", "111", "001", "001"}}, {'5', {"111", "100", "111", "001", "111"}},
        {'6', {"111", "100", "111", "101", "111"}}, {'7', {"111", "001", "001", "001", "001"}},
        {'8', {"111", "101", "111", "101", "111"}}, {'9', {"111", "101", "111", "001", "111"}},
        {'.', {"000", "000", "000", "000", "010"}}, {'=', {"000", "111", "000", "111", "000"}},
        {'-', {"000", "000", "111", "000", "000"}}, {'_', {"000", "000", "000", "000", "111"}},
        {' ', {"000", "000", "000", "000", "000"}}, {'A', {"010", "101", "111", "101", "101"}},
        {'B', {"110", "101", "110", "101", "110"}}, {'C', {"111", "100", "100", "100", "111"}},
        {'D', {"110", "101", "101", "101", "110"}}, {'E', {"111", "100", "111", "100", "111"}},
        {'F', {"111", "100", "111", "100", "100"}}, {'G', {"111", "100", "101", "101", "111"}},
        {'H', {"101", "101", "111", "101", "101"}}, {'I', {"111", "010", "010", "010", "111"}},
        {'J', {"001", "001", "001", "101", "111"}}, {'K', {"101", "101", "110", "101", "101"}},
        {'L', {"100", "100", "100", "100", "111"}}, {'M', {"101", "111", "111", "101", "101"}},
        {'N', {"110", "101", "101", "101", "101"}}, {'O', {"111", "101", "101", "101", "111"}},
        {'P', {"111", "101", "111", "100", "100"}}, {'Q', {"111", "101", "101", "111", "001"}},
        {'R', {"110", "101", "110", "101", "101"}}, {'S', {"111", "100", "111", "001", "111"}},
        {'T', {"111", "010", "010", "010", "010"}}, {'U', {"101", "101", "101", "101", "111"}},
        {'V', {"101", "101", "101", "101", "010"}}, {'W', {"101", "101", "111", "111", "101"}},
        {'X', {"101", "101", "010", "101", "101"}}, {'Y', {"101", "101", "010", "010", "010"}},
        {'Z', {"111", "001", "010", "100", "111"}},
    };
    return g;
}

struct Color {
    std::uint8_t r, g, b;
};

constexpr Color kPalette[] = {{214, 39, 40}, {31, 119, 180}, {44, 160, 44}, {255, 127, 14},
                              {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127}};

class Canvas {
public:
    Canvas(int w, int h) : raster_{w, h, 3, std::vector<std::uint8_t>(static_cast<std::size_t>(w) * h * 3, 255)} {}

    void pixel(int x, int y, Color c) {
        if (x < 0 || y < 0 || x >= raster_.width || y >= raster_.height) return;
        auto* p = &raster_.pixels[(static_cast<std::size_t>(y) * raster_.width + x) * 3];
        p[0] = c.r;
        p[1] = c.g;
        p[2] = c.b;
    }

    void rect(int x0, int y0, int x1, int y1, Color c) {
        for (int y = y0; y <= y1; ++y)
            for (int x = x0; x <= x1; ++x) pixel(x, y, c);
    }

    void line(double x0, double y0, double x1, double y1, Color c, int thick = 1) {
        const int steps = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
        for (int i = 0; i <= steps; ++i) {
            const double t = static_cast<double>(i) / steps;
            const int x = static_cast<int>(std::lround(x0 + t * (x1 - x0)));
            const int y = static_cast<int>(std::lround(y0 + t * (y1 - y0)));
            rect(x - thick / 2, y - thick / 2, x + (thick - 1) / 2, y + (thick - 1) / 2, c);
        }
    }

    // Returns the text width in pixels.
    int text(int x, int y, const std::string& s, Color c, int scale = 2) {
        int cx = x;
        for (char ch : s) {
            const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
            auto it = glyphs().find(up);
            if (it != glyphs().end()) {
                for (int row = 0; row < 5; ++row)
                    for (int col = 0; col < 3; ++col)
                        if (it->second[row][col] == '1')
                            rect(cx + col * scale, y + row * scale, cx + col * scale + scale - 1,
                                 y + row * scale + scale - 1, c);
            }
            cx += 4 * scale;
        }
        return cx - x;
    }

    const Raster& raster() const { return raster_; }

private:
    Raster raster_;
};

std::string tick_label(double v) {
    char buf[32];
    const double a = std::abs(v);
    if (a >= 1e9) std::snprintf(buf, sizeof(buf), "%.1fG", v / 1e9);
    else if (a >= 1e6) std::snprintf(buf, sizeof(buf), "%.1fM", v / 1e6);
    else if (a >= 1e4) std::snprintf(buf, sizeof(buf), "%.0fK", v / 1e3);
    else if (a >= 100 || v == std::floor(v)) std::snprintf(buf, sizeof(buf), "%.0f", v);
    else std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

void line_plot(const std::string& title, const std::string& xlabel, std::vector<Series> series,
               const std::filesystem::path& path, bool unit_y = false) {
    const int w = 640, h = 420, left = 80, right = 610, top = 40, bottom = 360;
    Canvas cv(w, h);
    const Color black{0, 0, 0}, grid{225, 225, 225};

    double xmin = 1e300, xmax = -1e300, ymax = unit_y ? 1.0 : 0.0;
    for (auto& s : series) {
        std::sort(s.points.begin(), s.points.end());
        for (auto [x, y] : s.points) {
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            if (!unit_y) ymax = std::max(ymax, y);
        }
    }
    if (xmax <= xmin) {
        xmin -= 1.0;
        xmax += 1.0;
    }
    if (ymax <= 0.0) ymax = 1.0;
    if (!unit_y) ymax *= 1.1;
    auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * (right - left); };
    auto py = [&](double y) { return bottom - y / ymax * (bottom - top); };

    for (int i = 0; i <= 5; ++i) {
        const double v = ymax * i / 5.0;
        const double y = py(v);
        cv.line(left, y, right, y, grid);
        const std::string lab = tick_label(v);
        cv.text(left - 8 - static_cast<int>(lab.size()) * 8, static_cast<int>(y) - 5, lab, black);
    }
    std::vector<double> xs;
    for (const auto& s : series)
        for (auto [x, y] : s.points) xs.push_back(x);
    std::sort(xs.begin(), xs.end());
    xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
    for (double x : xs) {
        cv.line(px(x), bottom, px(x), bottom + 5, black);
        const std::string lab = tick_label(x);
        cv.text(static_cast<int>(px(x)) - static_cast<int>(lab.size()) * 4, bottom + 9, lab, black);
    }
    cv.line(left, top, left, bottom, black, 2);
    cv.line(left, bottom, right, bottom, black, 2);
    cv.text(left, 12, title, black, 3);
    cv.text((left + right) / 2 - static_cast<int>(xlabel.size()) * 4, bottom + 30, xlabel, black);

    int legend_y = top + 6;
    for (std::size_t i = 0; i < series.size(); ++i) {
        const Color c = kPalette[i % std::size(kPalette)];
        const auto& pts = series[i].points;
        for (std::size_t j = 1; j < pts.size(); ++j) {
            cv.line(px(pts[j - 1].first), py(pts[j - 1].second), px(pts[j].first), py(pts[j].second), c, 2);
        }
        for (auto [x, y] : pts) {
            const int cx = static_cast<int>(std::lround(px(x))), cy = static_cast<int>(std::lround(py(y)));
            cv.rect(cx - 3, cy - 3, cx + 3, cy + 3, c);
        }
        cv.rect(left + 12, legend_y, left + 26, legend_y + 9, c);
        cv.text(left + 32, legend_y, series[i].label, black);
        legend_y += 16;
    }
    write_png(path, cv.raster());
}

std::vector<Series> bench_series(std::span<const BenchRecord> records, double (*value)(const BenchRecord&)) {
    std::map<std::pair<std::string, int>, Series> grouped;
    for (const auto& r : records) {
        auto& s = grouped[{r.model, r.n}];
        s.label = r.model + " N=" + std::to_string(r.n);
        s.points.emplace_back(r.k, value(r));
    }
    std::vector<Series> out;
    for (auto& [key, s] : grouped) out.push_back(std::move(s));
    return out;
}

}  // namespace

ReportFiles emit_report(std::span<const BenchRecord> records, std::span<const MiouPoint> miou_points,
                        const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec || !std::filesystem::is_directory(out_dir)) {
        throw std::runtime_error("cannot create report directory " + out_dir.string());
    }
    ReportFiles files;
    files.csv = out_dir / "bench.csv";
    {
        std::ofstream f(files.csv, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + files.csv.string());
        f << bench_csv(records);
        if (!f) throw std::runtime_error("failed writing " + files.csv.string());
    }
    if (!records.empty()) {
        files.plots.push_back(out_dir / "latency_vs_k.png");
        line_plot("latency ms vs K", "K shots",
                  bench_series(records, [](const BenchRecord& r) { return r.latency_ms_median; }), files.plots.back());
        files.plots.push_back(out_dir / "memory_vs_k.png");
        line_plot("peak bytes vs K", "K shots",
                  bench_series(records, [](const BenchRecord& r) { return static_cast<double>(r.peak_bytes); }),
                  files.plots.back());
    }
    if (!miou_points.empty()) {
        std::map<std::string, Series> grouped;
        for (const auto& p : miou_points) {
            grouped[p.model].label = p.model;
            grouped[p.model].points.emplace_back(p.m, p.miou);
        }
        std::vector<Series> series;
        for (auto& [k, s] : grouped) series.push_back(std::move(s));
        files.plots.push_back(out_dir / "miou_vs_m.png");
        line_plot("miou vs M", "M support images", std::move(series), files.plots.back(), true);
    }
    return files;
}

}  // namespace distillfss
