#include "distillfss/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace distillfss {

namespace {

constexpr const char* kMagic = "DISTILLFSS-CHECKPOINT 1";

const char* kind_name(CheckpointKind k) { return k == CheckpointKind::Teacher ? "teacher" : "student"; }

std::string read_line(std::istream& in, const std::filesystem::path& path) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("truncated checkpoint header in " + path.string());
    return line;
}

std::string read_blob(std::istream& in, const std::string& tag, const std::filesystem::path& path) {
    std::istringstream head(read_line(in, path));
    std::string got;
    std::size_t bytes = 0;
    if (!(head >> got >> bytes) || got != tag) {
        throw std::runtime_error("checkpoint " + path.string() + ": expected '" + tag + "' section");
    }
    std::string blob(bytes, '\0');
    in.read(blob.data(), static_cast<std::streamsize>(bytes));
    if (in.gcount() != static_cast<std::streamsize>(bytes) || in.get() != '\n') {
        throw std::runtime_error("checkpoint " + path.string() + ": truncated '" + tag + "' section");
    }
    return blob;
}

ParamStore to_store(const Checkpoint& ckpt) {
    ParamStore store;
    for (const auto& [name, t] : ckpt.blocks) store.add(name, t);
    return store;
}

void add_blocks(Checkpoint& ckpt, const ParamStore& store, bool skip_attention) {
    for (const auto& [name, v] : store.entries()) {
        if (skip_attention && block_of(name) == Block::AttentionWeights) continue;
        ckpt.blocks.emplace_back(name, v.value());
    }
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::ostringstream out;
    const std::string config_text = ckpt.config.serialize();
    out << kMagic << '\n' << "kind " << kind_name(ckpt.kind) << '\n';
    out << "config " << config_text.size() << '\n' << config_text << '\n';
    out << "metrics " << ckpt.metrics.size() << '\n' << ckpt.metrics << '\n';
    std::size_t total = 0;
    out << "blocks " << ckpt.blocks.size() << '\n';
    for (const auto& [name, t] : ckpt.blocks) {
        if (name.find_first_of(" \n") != std::string::npos) throw std::invalid_argument("bad block name '" + name + "'");
        out << name << ' ' << t.rank();
        for (int d : t.shape()) out << ' ' << d;
        out << '\n';
        total += t.size();
    }
    out << "data " << total << '\n';
    std::string payload = out.str();
    payload.reserve(payload.size() + total * 4);
    for (const auto& [name, t] : ckpt.blocks) {
        for (std::size_t i = 0; i < t.size(); ++i) {
            const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(t[i]));
            for (int b = 0; b < 4; ++b) payload.push_back(static_cast<char>((bits >> (8 * b)) & 0xffu));
        }
    }

    const std::filesystem::path parent = path.has_parent_path() ? path.parent_path() : std::filesystem::path(".");
    if (!std::filesystem::is_directory(parent)) {
        throw std::runtime_error("cannot write checkpoint " + path.string() + ": directory does not exist");
    }
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write checkpoint " + path.string());
        f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
        f.flush();
        if (!f) {
            std::filesystem::remove(tmp);
            throw std::runtime_error("failed writing checkpoint " + path.string());
        }
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
    if (read_line(in, path) != kMagic) throw std::runtime_error(path.string() + " is not a checkpoint");
    Checkpoint ckpt;
    const std::string kind = read_line(in, path);
    if (kind == "kind teacher") ckpt.kind = CheckpointKind::Teacher;
    else if (kind == "kind student") ckpt.kind = CheckpointKind::Student;
    else throw std::runtime_error("checkpoint " + path.string() + ": unknown " + kind);
    ckpt.config = Config::parse(read_blob(in, "config", path));
    ckpt.metrics = read_blob(in, "metrics", path);

    std::size_t count = 0;
    {
        std::istringstream head(read_line(in, path));
        std::string tag;
        if (!(head >> tag >> count) || tag != "blocks") throw std::runtime_error("checkpoint " + path.string() + ": bad block manifest");
    }
    std::vector<std::pair<std::string, Shape>> manifest;
    for (std::size_t i = 0; i < count; ++i) {
        std::istringstream ls(read_line(in, path));
        std::string name;
        int rank = 0;
        if (!(ls >> name >> rank) || rank < 0) throw std::runtime_error("checkpoint " + path.string() + ": bad manifest line");
        Shape shape(static_cast<std::size_t>(rank));
        for (int& d : shape)
            if (!(ls >> d) || d < 0) throw std::runtime_error("checkpoint " + path.string() + ": bad shape for " + name);
        manifest.emplace_back(name, shape);
    }
    std::size_t total = 0;
    {
        std::istringstream head(read_line(in, path));
        std::string tag;
        if (!(head >> tag >> total) || tag != "data") throw std::runtime_error("checkpoint " + path.string() + ": missing data section");
    }
    std::size_t expected = 0;
    for (const auto& [n, s] : manifest) expected += shape_numel(s);
    if (expected != total) throw std::runtime_error("checkpoint " + path.string() + ": manifest and data size disagree");
    std::string raw(total * 4, '\0');
    in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
    if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
        throw std::runtime_error("checkpoint " + path.string() + ": truncated parameter data");
    }
    std::size_t off = 0;
    for (auto& [name, shape] : manifest) {
        Tensor t(shape);
        for (std::size_t i = 0; i < t.size(); ++i, off += 4) {
            std::uint32_t bits = 0;
            for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(raw[off + b])) << (8 * b);
            t[i] = static_cast<double>(std::bit_cast<float>(bits));
        }
        ckpt.blocks.emplace_back(std::move(name), std::move(t));
    }
    return ckpt;
}

void write_arch(const ArchConfig& arch, Config& cfg) {
    const auto& s = arch.backbone.scales;
    cfg.set("arch.base", std::to_string(s.base));
    cfg.set("arch.n_min", std::to_string(s.n_min));
    cfg.set("arch.n_max", std::to_string(s.n_max));
    cfg.set("arch.layers_per_scale", join_ints(s.layers_per_scale));
    cfg.set("arch.in_channels", std::to_string(arch.backbone.in_channels));
    cfg.set("arch.stem_channels", std::to_string(arch.backbone.stem_channels));
    cfg.set("arch.stage_channels", join_ints(arch.backbone.stage_channels));
    cfg.set("arch.mapper_width", std::to_string(arch.decoder.mapper_width));
    cfg.set("arch.merge_width", std::to_string(arch.decoder.merge_width));
    cfg.set("arch.skip_width", std::to_string(arch.decoder.skip_width));
    cfg.set("arch.mixer_width", std::to_string(arch.decoder.mixer_width));
}

ArchConfig read_arch(const Config& cfg) {
    ArchConfig a = default_arch();
    auto& s = a.backbone.scales;
    s.base = static_cast<int>(cfg.get_int("arch.base", s.base));
    s.n_min = static_cast<int>(cfg.get_int("arch.n_min", s.n_min));
    s.n_max = static_cast<int>(cfg.get_int("arch.n_max", s.n_max));
    s.layers_per_scale = cfg.get_ints("arch.layers_per_scale", s.layers_per_scale);
    a.backbone.in_channels = static_cast<int>(cfg.get_int("arch.in_channels", a.backbone.in_channels));
    a.backbone.stem_channels = static_cast<int>(cfg.get_int("arch.stem_channels", a.backbone.stem_channels));
    a.backbone.stage_channels = cfg.get_ints("arch.stage_channels", a.backbone.stage_channels);
    a.decoder.mapper_width = static_cast<int>(cfg.get_int("arch.mapper_width", a.decoder.mapper_width));
    a.decoder.merge_width = static_cast<int>(cfg.get_int("arch.merge_width", a.decoder.merge_width));
    a.decoder.skip_width = static_cast<int>(cfg.get_int("arch.skip_width", a.decoder.skip_width));
    a.decoder.mixer_width = static_cast<int>(cfg.get_int("arch.mixer_width", a.decoder.mixer_width));
    a.sync();
    return a;
}

Checkpoint make_checkpoint(const Teacher& teacher, const Config& run_config, const std::string& metrics) {
    Checkpoint c;
    c.kind = CheckpointKind::Teacher;
    c.config = run_config;
    write_arch(teacher.config(), c.config);
    c.metrics = metrics;
    add_blocks(c, teacher.params(), false);
    return c;
}

Checkpoint make_checkpoint(const Student& student, const Config& run_config, const std::string& metrics) {
    Checkpoint c;
    c.kind = CheckpointKind::Student;
    c.config = run_config;
    write_arch(student.config(), c.config);
    c.config.set("student.num_classes", std::to_string(student.num_classes()));
    for (const auto& [k, v] : student.metadata) c.config.set("student.meta." + k, v);
    c.metrics = metrics;
    add_blocks(c, student.params(), true);
    return c;
}

Teacher teacher_from_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.kind != CheckpointKind::Teacher) {
        throw std::invalid_argument("checkpoint holds a student; it has no attention weights for a teacher");
    }
    return Teacher::from_params(read_arch(ckpt.config), to_store(ckpt));
}

Student student_from_checkpoint(const Checkpoint& ckpt) {
    const ArchConfig arch = read_arch(ckpt.config);
    const int n = static_cast<int>(ckpt.config.get_int("student.num_classes", 1));
    std::vector<std::string> missing;
    const int layers = arch.backbone.scales.total_layers();
    for (int c = 1; c <= n; ++c) {
        for (int l = 0; l < layers; ++l) {
            const std::string base = convdist_name(c, static_cast<std::size_t>(l));
            for (const char* suffix : {".conv3.weight", ".conv3.bias", ".conv1.weight", ".conv1.bias"}) {
                bool found = false;
                for (const auto& [name, t] : ckpt.blocks) found = found || name == base + suffix;
                if (!found) missing.push_back(base + suffix);
            }
        }
    }
    if (!missing.empty()) {
        std::string list;
        for (std::size_t i = 0; i < missing.size() && i < 4; ++i) list += (i ? ", " : "") + missing[i];
        if (missing.size() > 4) list += ", ... (" + std::to_string(missing.size()) + " total)";
        throw std::invalid_argument("checkpoint lacks ConvDist blocks required by a student: " + list);
    }
    ParamStore store;
    for (const auto& [name, t] : ckpt.blocks) {
        if (block_of(name) == Block::AttentionWeights) continue;
        store.add(name, t);
    }
    Student s = Student::from_params(arch, n, std::move(store));
    const std::string prefix = "student.meta.";
    for (const auto& [k, v] : ckpt.config.values())
        if (k.rfind(prefix, 0) == 0) s.metadata[k.substr(prefix.size())] = v;
    return s;
}

}  // namespace distillfss
