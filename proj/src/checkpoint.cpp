#include "sgdfuse/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "sgdfuse/errors.hpp"

namespace sgdfuse {

namespace {

constexpr char kMagic[16] = {'S', 'G', 'D', 'F', 'U', 'S', 'E', '-',
                             'C', 'K', 'P', 'T', '\0', '\0', '\0', '\0'};

template <typename T>
void put(std::ostream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw CheckpointError("truncated checkpoint");
    return v;
}

void put_str(std::ostream& out, const std::string& s) {
    put<std::uint64_t>(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_str(std::istream& in) {
    auto n = get<std::uint64_t>(in);
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) throw CheckpointError("truncated checkpoint string");
    return s;
}

void put_table(std::ostream& out, const std::map<std::string, Tensor>& table) {
    put<std::uint64_t>(out, table.size());
    for (const auto& [name, t] : table) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (int i = 0; i < t.rank(); ++i) put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim(i)));
        put<std::uint64_t>(out, static_cast<std::uint64_t>(t.size()));
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
}

std::map<std::string, Tensor> get_table(std::istream& in) {
    std::map<std::string, Tensor> table;
    auto count = get<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < count; ++i) {
        auto name_len = get<std::uint32_t>(in);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        auto ndim = get<std::uint32_t>(in);
        std::vector<int> dims(ndim);
        for (auto& d : dims) d = static_cast<int>(get<std::uint32_t>(in));
        auto n = get<std::uint64_t>(in);
        Tensor t(dims);
        if (static_cast<std::uint64_t>(t.size()) != n)
            throw CheckpointError("blob size mismatch for '" + name + "'");
        in.read(reinterpret_cast<char*>(t.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        if (!in) throw CheckpointError("truncated blob '" + name + "'");
        table.emplace(std::move(name), std::move(t));
    }
    return table;
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::filesystem::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, ckpt.version);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.stage));
    put<std::uint64_t>(out, ckpt.step);
    put<std::uint64_t>(out, ckpt.seed);
    put_str(out, ckpt.config_toml);
    put_str(out, ckpt.rng_state);
    put_table(out, ckpt.params);
    put<std::uint8_t>(out, ckpt.has_optimizer ? 1 : 0);
    if (ckpt.has_optimizer) {
        put<std::uint64_t>(out, static_cast<std::uint64_t>(ckpt.adam_t));
        put_table(out, ckpt.adam_m);
        put_table(out, ckpt.adam_v);
    }
    if (!out) throw IoError("write failure on '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint '" + path.string() + "'");
    char magic[16];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw CheckpointError("'" + path.string() + "' is not a checkpoint (bad magic)");
    Checkpoint c;
    c.version = get<std::uint32_t>(in);
    if (c.version != 1)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(c.version));
    c.stage = static_cast<int>(get<std::uint32_t>(in));
    c.step = get<std::uint64_t>(in);
    c.seed = get<std::uint64_t>(in);
    c.config_toml = get_str(in);
    c.rng_state = get_str(in);
    c.params = get_table(in);
    c.has_optimizer = get<std::uint8_t>(in) != 0;
    if (c.has_optimizer) {
        c.adam_t = static_cast<std::int64_t>(get<std::uint64_t>(in));
        c.adam_m = get_table(in);
        c.adam_v = get_table(in);
    }
    return c;
}

Checkpoint snapshot(int stage, std::uint64_t step, std::uint64_t seed,
                    const std::string& config_toml, const nn::ParamStore& ps, nn::Adam* opt) {
    Checkpoint c;
    c.stage = stage;
    c.step = step;
    c.seed = seed;
    c.config_toml = config_toml;
    c.rng_state = "seed:" + std::to_string(seed) + ";step:" + std::to_string(step);
    for (const auto& [name, v] : ps.all()) c.params.emplace(name, v->value);
    if (opt) {
        c.has_optimizer = true;
        c.adam_t = opt->t();
        c.adam_m = opt->moment1();
        c.adam_v = opt->moment2();
    }
    return c;
}

void restore_params(const Checkpoint& ckpt, const nn::ParamStore& ps) {
    std::string problems;
    for (const auto& [name, v] : ps.all()) {
        auto it = ckpt.params.find(name);
        if (it == ckpt.params.end()) {
            problems += "  missing parameter: " + name + "\n";
            continue;
        }
        if (it->second.dims() != v->value.dims())
            problems += "  shape mismatch for " + name + ": checkpoint " +
                        it->second.shape_str() + " vs model " + v->value.shape_str() + "\n";
    }
    for (const auto& [name, _] : ckpt.params)
        if (!ps.has(name)) problems += "  unexpected parameter: " + name + "\n";
    if (!problems.empty())
        throw CheckpointError("incompatible checkpoint:\n" + problems);
    for (const auto& [name, v] : ps.all()) v->value = ckpt.params.at(name);
}

void restore_optimizer(const Checkpoint& ckpt, nn::Adam& opt) {
    if (!ckpt.has_optimizer) throw CheckpointError("checkpoint has no optimizer state");
    opt.set_t(ckpt.adam_t);
    opt.moment1() = ckpt.adam_m;
    opt.moment2() = ckpt.adam_v;
}

} // namespace sgdfuse
