#include "flowsr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <vector>

#include "flowsr/errors.hpp"

namespace flowsr {

uint32_t crc32(const void* data, size_t n) {
    static uint32_t table[256];
    static bool ready = false;
    if (!ready) {
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1u) ? 0xEDB88320u ^ (c >> 1) : (c >> 1);
            table[i] = c;
        }
        ready = true;
    }
    const auto* p = static_cast<const unsigned char*>(data);
    uint32_t c = 0xFFFFFFFFu;
    for (size_t i = 0; i < n; ++i) c = table[(c ^ p[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

namespace {

constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF64 = 1;

void put_u32(std::string& out, uint32_t v) {
    out.push_back(char(v & 0xFF));
    out.push_back(char((v >> 8) & 0xFF));
    out.push_back(char((v >> 16) & 0xFF));
    out.push_back(char((v >> 24) & 0xFF));
}

void put_f64(std::string& out, double d) {
    const uint64_t v = std::bit_cast<uint64_t>(d);
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;
    const std::string& path;

    [[noreturn]] void fail(const std::string& what) const {
        throw IoError("checkpoint '" + path + "': " + what);
    }
    void need(size_t n) const {
        if (pos + n > buf.size()) fail("truncated file");
    }
    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    uint8_t u8() {
        need(1);
        return uint8_t(buf[pos++]);
    }
    double f64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
        pos += 8;
        return std::bit_cast<double>(v);
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

void append_record(std::string& out, const std::string& name, const Tensor& t) {
    put_u32(out, uint32_t(name.size()));
    out += name;
    out.push_back(char(kDtypeF64));
    put_u32(out, uint32_t(t.ndim()));
    for (int64_t d = 0; d < t.ndim(); ++d) put_u32(out, uint32_t(t.dim(d)));
    for (int64_t i = 0; i < t.numel(); ++i) put_f64(out, t.data()[i]);
}

void append_record(std::string& out, const std::string& name, const std::vector<double>& v) {
    append_record(out, name, Tensor::from_data({int64_t(v.size())}, v));
}

}  // namespace

void save_checkpoint(const std::string& path, const RunConfig& cfg, FlowModel& model,
                     LrEncoder& enc, const TrainResume* optim) {
    std::string out;
    out += "SRFL";
    put_u32(out, kVersion);
    const std::string arch = serialize_arch_section(cfg);
    put_u32(out, uint32_t(arch.size()));
    out += arch;

    model.visit_params(
        [&](const std::string& name, Tensor& t) { append_record(out, "model." + name, t); });
    enc.visit_params(
        "", [&](const std::string& name, Tensor& t) { append_record(out, "enc." + name, t); });
    append_record(out, "model.actnorm_initialized",
                  Tensor::scalar(model.actnorm_initialized() ? 1.0 : 0.0));
    if (optim) {
        append_record(out, "train.step", Tensor::scalar(double(optim->start_step)));
        for (size_t i = 0; i < optim->slots.size(); ++i) {
            const std::string p = "optim." + std::to_string(i) + ".";
            append_record(out, p + "m", optim->slots[i].m);
            append_record(out, p + "v", optim->slots[i].v);
            append_record(out, p + "t", Tensor::scalar(double(optim->slots[i].t)));
        }
    }
    put_u32(out, crc32(out.data(), out.size()));

    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot write checkpoint '" + path + "'");
    f.write(out.data(), std::streamsize(out.size()));
    if (!f) throw IoError("short write to checkpoint '" + path + "'");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint '" + path + "'");
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    Reader r{buf, 0, path};
    if (buf.size() < 12) r.fail("truncated file");
    const uint32_t computed = crc32(buf.data(), buf.size() - 4);
    Reader tail{buf, buf.size() - 4, path};
    if (tail.u32() != computed) r.fail("checksum mismatch, refusing to load");

    if (r.bytes(4) != "SRFL") r.fail("bad magic");
    const uint32_t version = r.u32();
    if (version != kVersion)
        r.fail("unsupported version " + std::to_string(version));
    const uint32_t arch_len = r.u32();
    RunConfig cfg = parse_config(r.bytes(arch_len));

    // Collect records up to the trailing CRC.
    std::map<std::string, Tensor> records;
    const size_t end = buf.size() - 4;
    while (r.pos < end) {
        const uint32_t name_len = r.u32();
        const std::string name = r.bytes(name_len);
        if (r.u8() != kDtypeF64) r.fail("record '" + name + "': unknown dtype");
        const uint32_t ndim = r.u32();
        std::vector<int64_t> dims;
        int64_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            dims.push_back(int64_t(r.u32()));
            numel *= dims.back();
        }
        std::vector<double> data(static_cast<size_t>(numel));
        for (int64_t i = 0; i < numel; ++i) data[size_t(i)] = r.f64();
        if (!records.emplace(name, Tensor::from_data(std::move(dims), std::move(data))).second)
            r.fail("duplicate record '" + name + "'");
    }
    if (r.pos != end) r.fail("trailing bytes after the last record");

    Rng scratch(0);  // construction values are overwritten below
    LoadedCheckpoint out{cfg, FlowModel(cfg.arch(), scratch), LrEncoder(cfg.encoder(), scratch),
                         false, {}};

    auto take = [&](const std::string& name, Tensor& dst) {
        auto it = records.find(name);
        if (it == records.end()) r.fail("missing record '" + name + "'");
        if (!it->second.same_shape(dst))
            r.fail("record '" + name + "' has shape " + shape_str(it->second.shape()) +
                   ", expected " + shape_str(dst.shape()));
        std::memcpy(dst.data(), it->second.data(), size_t(dst.numel()) * sizeof(double));
        records.erase(it);
    };
    out.model.visit_params(
        [&](const std::string& name, Tensor& t) { take("model." + name, t); });
    out.enc.visit_params(
        "", [&](const std::string& name, Tensor& t) { take("enc." + name, t); });

    auto it = records.find("model.actnorm_initialized");
    if (it == records.end()) r.fail("missing record 'model.actnorm_initialized'");
    if (it->second.vec().at(0) != 0.0) out.model.mark_actnorm_initialized();
    records.erase(it);

    if (records.count("train.step")) {
        out.has_optim = true;
        out.resume.start_step = int64_t(records.at("train.step").vec().at(0));
        records.erase("train.step");
        for (size_t i = 0;; ++i) {
            const std::string p = "optim." + std::to_string(i) + ".";
            auto mi = records.find(p + "m");
            if (mi == records.end()) break;
            OptimSlotState slot;
            slot.m = mi->second.vec();
            records.erase(mi);
            auto vi = records.find(p + "v");
            if (vi == records.end()) r.fail("missing record '" + p + "v'");
            slot.v = vi->second.vec();
            records.erase(vi);
            auto ti = records.find(p + "t");
            if (ti == records.end()) r.fail("missing record '" + p + "t'");
            slot.t = int64_t(ti->second.vec().at(0));
            records.erase(ti);
            out.resume.slots.push_back(std::move(slot));
        }
    }
    if (!records.empty()) r.fail("unexpected record '" + records.begin()->first + "'");
    return out;
}

}  // namespace flowsr
