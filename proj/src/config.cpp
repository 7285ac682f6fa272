#include "flowsr/config.hpp"

#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include "flowsr/errors.hpp"

namespace flowsr {

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

[[noreturn]] void bad(int line, const std::string& what) {
    throw ConfigError("config line " + std::to_string(line) + ": " + what);
}

int64_t to_i64(const std::string& v, int line) {
    try {
        size_t pos = 0;
        long long r = std::stoll(v, &pos);
        if (pos != v.size()) bad(line, "trailing characters in integer '" + v + "'");
        return r;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        bad(line, "expected an integer, got '" + v + "'");
    }
}

uint64_t to_u64(const std::string& v, int line) {
    try {
        size_t pos = 0;
        unsigned long long r = std::stoull(v, &pos);
        if (pos != v.size()) bad(line, "trailing characters in integer '" + v + "'");
        return r;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        bad(line, "expected an unsigned integer, got '" + v + "'");
    }
}

double to_f64(const std::string& v, int line) {
    try {
        size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) bad(line, "trailing characters in number '" + v + "'");
        return r;
    } catch (const ConfigError&) {
        throw;
    } catch (...) {
        bad(line, "expected a number, got '" + v + "'");
    }
}

bool to_bool(const std::string& v, int line) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    bad(line, "expected true/false, got '" + v + "'");
}

std::vector<double> to_list(const std::string& v, int line) {
    std::vector<double> out;
    std::string item;
    std::istringstream is(v);
    while (std::getline(is, item, ',')) out.push_back(to_f64(trim(item), line));
    if (out.empty()) bad(line, "expected a comma-separated list of numbers");
    return out;
}

std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
    return os.str();
}

std::string fmt(const std::vector<double>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += fmt(v[i]);
    }
    return out;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string raw;
    std::string section;
    int line = 0;
    while (std::getline(is, raw)) {
        ++line;
        const size_t hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        const std::string s = trim(raw);
        if (s.empty()) continue;
        if (s.front() == '[') {
            if (s.back() != ']') bad(line, "malformed section header '" + s + "'");
            section = s.substr(1, s.size() - 2);
            if (section != "arch" && section != "train" && section != "data" &&
                section != "eval")
                bad(line, "unknown section [" + section + "]");
            continue;
        }
        const size_t eq = s.find('=');
        if (eq == std::string::npos) bad(line, "expected key=value, got '" + s + "'");
        const std::string key = trim(s.substr(0, eq));
        const std::string val = trim(s.substr(eq + 1));
        if (section.empty()) bad(line, "key '" + key + "' appears before any section");

        if (section == "arch") {
            if (key == "levels") cfg.levels = to_i64(val, line);
            else if (key == "steps_per_level") cfg.steps_per_level = to_i64(val, line);
            else if (key == "transitional_steps") cfg.transitional_steps = to_i64(val, line);
            else if (key == "hidden") cfg.hidden = to_i64(val, line);
            else if (key == "scale_factor") cfg.scale_factor = to_i64(val, line);
            else if (key == "enc_blocks") cfg.enc_blocks = to_i64(val, line);
            else if (key == "enc_width") cfg.enc_width = to_i64(val, line);
            else if (key == "enc_taps") cfg.enc_taps = to_i64(val, line);
            else bad(line, "unknown key '" + key + "' in [arch]");
        } else if (section == "train") {
            if (key == "total_steps") cfg.total_steps = to_i64(val, line);
            else if (key == "batch") cfg.batch = to_i64(val, line);
            else if (key == "hr_patch") cfg.hr_patch = to_i64(val, line);
            else if (key == "lr0") cfg.lr0 = to_f64(val, line);
            else if (key == "halving_points") cfg.halving_points = to_list(val, line);
            else if (key == "noise_std") cfg.noise_std = to_f64(val, line);
            else if (key == "freeze_encoder_frac") cfg.freeze_encoder_frac = to_f64(val, line);
            else if (key == "grad_clip") cfg.grad_clip = to_f64(val, line);
            else if (key == "pretrain_steps") cfg.pretrain_steps = to_i64(val, line);
            else if (key == "pretrain_lr") cfg.pretrain_lr = to_f64(val, line);
            else bad(line, "unknown key '" + key + "' in [train]");
        } else if (section == "data") {
            if (key == "kind") cfg.data_kind = val;
            else if (key == "size") cfg.data_size = to_i64(val, line);
            else if (key == "count") cfg.data_count = to_i64(val, line);
            else if (key == "seed") cfg.data_seed = to_u64(val, line);
            else if (key == "kernel") cfg.kernel = val;
            else if (key == "antialias") cfg.antialias = to_bool(val, line);
            else bad(line, "unknown key '" + key + "' in [data]");
        } else {  // eval
            if (key == "taus") cfg.eval_taus = to_list(val, line);
            else if (key == "samples") cfg.eval_samples = to_i64(val, line);
            else if (key == "count") cfg.eval_count = to_i64(val, line);
            else if (key == "seed") cfg.eval_seed = to_u64(val, line);
            else bad(line, "unknown key '" + key + "' in [eval]");
        }
    }
    return cfg;
}

RunConfig load_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_config(buf.str());
}

ArchConfig RunConfig::arch() const {
    ArchConfig a;
    a.levels = levels;
    a.steps_per_level = steps_per_level;
    a.transitional_steps = transitional_steps;
    a.hidden = hidden;
    a.scale_factor = scale_factor;
    a.cond_channels = enc_width * enc_taps;
    return a;
}

EncoderConfig RunConfig::encoder() const {
    EncoderConfig e;
    e.blocks = enc_blocks;
    e.width = enc_width;
    e.taps = enc_taps;
    return e;
}

TrainConfig RunConfig::train(uint64_t seed) const {
    TrainConfig t;
    t.total_steps = total_steps;
    t.batch = batch;
    t.hr_patch = hr_patch;
    t.lr0 = lr0;
    t.lr_halving_points = halving_points;
    t.noise_std = noise_std;
    t.freeze_encoder_frac = freeze_encoder_frac;
    t.grad_clip = grad_clip;
    t.seed = seed;
    return t;
}

DownscaleKernel RunConfig::downscale_kernel() const {
    DownscaleKernel k;
    if (kernel == "bicubic") k.kind = ResampleKind::bicubic_a_minus_half;
    else if (kernel == "box") k.kind = ResampleKind::box;
    else if (kernel == "bilinear") k.kind = ResampleKind::bilinear;
    else throw ConfigError("unknown kernel '" + kernel + "' (bicubic|box|bilinear)");
    k.factor = scale_factor;
    k.antialias = antialias;
    return k;
}

namespace {

CorpusKind kind_from_string(const std::string& s) {
    if (s == "gradients") return CorpusKind::gradients;
    if (s == "gaussian_blobs") return CorpusKind::gaussian_blobs;
    if (s == "checkerboards") return CorpusKind::checkerboards;
    if (s == "mixed") return CorpusKind::mixed;
    throw ConfigError("unknown data kind '" + s +
                      "' (gradients|gaussian_blobs|checkerboards|mixed)");
}

}  // namespace

CorpusConfig RunConfig::train_corpus() const {
    CorpusConfig c;
    c.kind = kind_from_string(data_kind);
    c.size = data_size;
    c.count = data_count;
    c.seed = data_seed;
    c.kernel = downscale_kernel();
    return c;
}

CorpusConfig RunConfig::eval_corpus() const {
    CorpusConfig c = train_corpus();
    c.count = eval_count;
    c.seed = eval_seed;
    return c;
}

void RunConfig::validate() const {
    arch().validate();
    encoder().validate();
    train(0).validate();
    train_corpus().validate();
    eval_corpus().validate();
    if (eval_samples < 1) throw ConfigError("eval: samples must be >= 1");
    for (double t : eval_taus)
        if (t < 0.0) throw ConfigError("eval: taus must be >= 0");
    if (pretrain_steps < 0) throw ConfigError("train: pretrain_steps must be >= 0");
    if (pretrain_lr <= 0.0) throw ConfigError("train: pretrain_lr must be > 0");
}

std::string serialize_arch_section(const RunConfig& c) {
    std::ostringstream os;
    os << "[arch]\n";
    os << "levels=" << c.levels << "\n";
    os << "steps_per_level=" << c.steps_per_level << "\n";
    os << "transitional_steps=" << c.transitional_steps << "\n";
    os << "hidden=" << c.hidden << "\n";
    os << "scale_factor=" << c.scale_factor << "\n";
    os << "enc_blocks=" << c.enc_blocks << "\n";
    os << "enc_width=" << c.enc_width << "\n";
    os << "enc_taps=" << c.enc_taps << "\n";
    return os.str();
}

std::string serialize_config(const RunConfig& c) {
    std::ostringstream os;
    os << serialize_arch_section(c);
    os << "\n[train]\n";
    os << "total_steps=" << c.total_steps << "\n";
    os << "batch=" << c.batch << "\n";
    os << "hr_patch=" << c.hr_patch << "\n";
    os << "lr0=" << fmt(c.lr0) << "\n";
    os << "halving_points=" << fmt(c.halving_points) << "\n";
    os << "noise_std=" << fmt(c.noise_std) << "\n";
    os << "freeze_encoder_frac=" << fmt(c.freeze_encoder_frac) << "\n";
    os << "grad_clip=" << fmt(c.grad_clip) << "\n";
    os << "pretrain_steps=" << c.pretrain_steps << "\n";
    os << "pretrain_lr=" << fmt(c.pretrain_lr) << "\n";
    os << "\n[data]\n";
    os << "kind=" << c.data_kind << "\n";
    os << "size=" << c.data_size << "\n";
    os << "count=" << c.data_count << "\n";
    os << "seed=" << c.data_seed << "\n";
    os << "kernel=" << c.kernel << "\n";
    os << "antialias=" << (c.antialias ? "true" : "false") << "\n";
    os << "\n[eval]\n";
    os << "taus=" << fmt(c.eval_taus) << "\n";
    os << "samples=" << c.eval_samples << "\n";
    os << "count=" << c.eval_count << "\n";
    os << "seed=" << c.eval_seed << "\n";
    return os.str();
}

}  // namespace flowsr
