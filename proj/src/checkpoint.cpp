#include "invflow/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <vector>

#include "invflow/errors.hpp"

namespace invflow {

namespace {

// Explicit little-endian encoding so files are portable across hosts.

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_i64(std::vector<std::uint8_t>& out, std::int64_t v) {
    put_u64(out, static_cast<std::uint64_t>(v));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
    put_u64(out, std::bit_cast<std::uint64_t>(v));
}

void put_str(std::vector<std::uint8_t>& out, const std::string& s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
    const std::vector<std::uint8_t>& b;
    std::size_t off = 0;

    void need(std::size_t n, const char* what) const {
        if (off + n > b.size()) {
            std::ostringstream msg;
            msg << "checkpoint: truncated while reading " << what << " at byte offset "
                << off << " (file has " << b.size() << " bytes)";
            throw FormatError(msg.str());
        }
    }

    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[off + i]) << (8 * i);
        off += 4;
        return v;
    }

    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[off + i]) << (8 * i);
        off += 8;
        return v;
    }

    std::int64_t i64(const char* what) { return static_cast<std::int64_t>(u64(what)); }

    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }

    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(b.data() + off), n);
        off += n;
        return s;
    }
};

void put_config(std::vector<std::uint8_t>& out, const ModelConfig& c) {
    put_u32(out, static_cast<std::uint32_t>(c.levels));
    put_u32(out, static_cast<std::uint32_t>(c.steps));
    put_u32(out, c.coupling == CouplingKind::quad ? 1 : 0);
    put_u32(out, static_cast<std::uint32_t>(c.hidden));
    put_u32(out, static_cast<std::uint32_t>(c.k));
    put_u32(out, static_cast<std::uint32_t>(c.channels));
    put_u32(out, static_cast<std::uint32_t>(c.height));
    put_u32(out, static_cast<std::uint32_t>(c.width));
    put_u32(out, c.conditional_split_prior ? 1 : 0);
    put_u64(out, c.seed);
    put_u32(out, static_cast<std::uint32_t>(c.dtype_bits));
    put_u32(out, c.identity_init ? 1 : 0);
}

ModelConfig read_config(Reader& r) {
    ModelConfig c;
    c.levels = static_cast<int>(r.u32("config.levels"));
    c.steps = static_cast<int>(r.u32("config.steps"));
    c.coupling = r.u32("config.coupling") == 1 ? CouplingKind::quad : CouplingKind::affine;
    c.hidden = static_cast<int>(r.u32("config.hidden"));
    c.k = static_cast<int>(r.u32("config.k"));
    c.channels = static_cast<int>(r.u32("config.channels"));
    c.height = static_cast<int>(r.u32("config.height"));
    c.width = static_cast<int>(r.u32("config.width"));
    c.conditional_split_prior = r.u32("config.split_prior") != 0;
    c.seed = r.u64("config.seed");
    c.dtype_bits = static_cast<int>(r.u32("config.dtype"));
    c.identity_init = r.u32("config.identity_init") != 0;
    return c;
}

}  // namespace

void save_checkpoint(FlowModel& model, const TrainerState& state,
                     const std::string& path) {
    std::vector<std::uint8_t> out;
    out.push_back('I');
    out.push_back('F');
    out.push_back('L');
    out.push_back('W');
    put_u32(out, kCheckpointVersion);
    put_config(out, model.config());
    put_i64(out, state.epoch);
    put_i64(out, state.adam.step);
    put_u64(out, state.adam.m.size());
    for (double v : state.adam.m) put_f64(out, v);
    for (double v : state.adam.v) put_f64(out, v);
    const Rng::State rs = state.rng.state();
    for (int i = 0; i < 4; ++i) put_u64(out, rs.words[i]);
    put_f64(out, rs.cached_normal);
    out.push_back(rs.has_cached_normal);

    std::vector<std::pair<std::string, std::vector<double>>> table;
    model.visit_params([&](const ParamSlot& slot) {
        table.emplace_back(slot.name,
                           std::vector<double>(slot.value, slot.value + slot.len));
    });
    put_u64(out, table.size());
    for (const auto& [name, vals] : table) {
        put_str(out, name);
        put_u64(out, vals.size());
        for (double v : vals) put_f64(out, v);
    }

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("checkpoint: cannot open for writing: " + path);
    f.write(reinterpret_cast<const char*>(out.data()),
            static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("checkpoint: write failure: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("checkpoint: cannot open: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                    std::istreambuf_iterator<char>());
    Reader r{bytes};
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), "IFLW", 4) != 0)
        throw FormatError("checkpoint: bad magic at byte offset 0 (expected IFLW)");
    r.off = 4;
    const std::uint32_t version = r.u32("version");
    if (version != kCheckpointVersion) {
        std::ostringstream msg;
        msg << "checkpoint: unsupported version " << version << " (this build reads "
            << kCheckpointVersion << ")";
        throw FormatError(msg.str());
    }
    const ModelConfig cfg = read_config(r);

    LoadedCheckpoint lc{FlowModel(cfg), TrainerState{}};
    lc.state.epoch = static_cast<int>(r.i64("epoch"));
    lc.state.adam.step = r.i64("adam.step");
    const std::uint64_t mn = r.u64("adam.len");
    lc.state.adam.m.resize(mn);
    lc.state.adam.v.resize(mn);
    for (std::uint64_t i = 0; i < mn; ++i) lc.state.adam.m[i] = r.f64("adam.m");
    for (std::uint64_t i = 0; i < mn; ++i) lc.state.adam.v[i] = r.f64("adam.v");
    Rng::State rs{};
    for (int i = 0; i < 4; ++i) rs.words[i] = r.u64("rng.word");
    rs.cached_normal = r.f64("rng.cached");
    r.need(1, "rng.has_cached");
    rs.has_cached_normal = bytes[r.off++];
    lc.state.rng.set_state(rs);

    std::map<std::string, std::vector<double>> table;
    const std::uint64_t count = r.u64("param count");
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.str("param name");
        const std::uint64_t len = r.u64("param len");
        std::vector<double> vals(len);
        for (std::uint64_t j = 0; j < len; ++j) vals[j] = r.f64("param value");
        if (!table.emplace(std::move(name), std::move(vals)).second)
            throw FormatError("checkpoint: duplicate parameter path in table");
    }
    if (r.off != bytes.size()) {
        std::ostringstream msg;
        msg << "checkpoint: " << bytes.size() - r.off << " trailing bytes at offset "
            << r.off;
        throw FormatError(msg.str());
    }

    std::size_t matched = 0, registry_size = 0;
    lc.model.visit_params([&](const ParamSlot& slot) {
        ++registry_size;
        auto it = table.find(slot.name);
        if (it == table.end())
            throw FormatError("checkpoint: missing parameter '" + slot.name + "'");
        if (it->second.size() != slot.len)
            throw FormatError("checkpoint: length mismatch for '" + slot.name + "'");
        std::copy(it->second.begin(), it->second.end(), slot.value);
        if (slot.masked) slot.masked->project();
        ++matched;
    });
    if (matched != table.size()) {
        std::ostringstream msg;
        msg << "checkpoint: parameter table has " << table.size()
            << " entries but the model registry has " << registry_size;
        throw FormatError(msg.str());
    }
    std::size_t total = 0;
    lc.model.visit_params([&](const ParamSlot& s) { total += s.len; });
    if (mn != total)
        throw FormatError("checkpoint: adam moment length does not match registry");
    lc.model.mark_actnorm_initialized();
    return lc;
}

}  // namespace invflow
