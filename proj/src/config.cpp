#include "sgdfuse/config.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <numeric>
#include <sstream>

#include "sgdfuse/diffusion.hpp"
#include "sgdfuse/errors.hpp"
#include "sgdfuse/sha256.hpp"

namespace sgdfuse {

const std::string& TomlValue::as_string() const {
    if (auto* s = std::get_if<std::string>(&v)) return *s;
    throw ConfigError("expected string, got " + repr());
}

std::int64_t TomlValue::as_int() const {
    if (auto* i = std::get_if<std::int64_t>(&v)) return *i;
    throw ConfigError("expected integer, got " + repr());
}

double TomlValue::as_double() const {
    if (auto* d = std::get_if<double>(&v)) return *d;
    if (auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
    throw ConfigError("expected number, got " + repr());
}

bool TomlValue::as_bool() const {
    if (auto* b = std::get_if<bool>(&v)) return *b;
    throw ConfigError("expected boolean, got " + repr());
}

const std::vector<TomlValue>& TomlValue::as_array() const {
    if (auto* a = std::get_if<std::vector<TomlValue>>(&v)) return *a;
    throw ConfigError("expected array, got " + repr());
}

std::string TomlValue::repr() const {
    struct V {
        std::string operator()(const std::string& s) const { return "\"" + s + "\""; }
        std::string operator()(std::int64_t i) const { return std::to_string(i); }
        std::string operator()(double d) const {
            std::ostringstream os;
            os << d;
            std::string s = os.str();
            if (s.find('.') == std::string::npos && s.find('e') == std::string::npos &&
                s.find("inf") == std::string::npos && s.find("nan") == std::string::npos)
                s += ".0";
            return s;
        }
        std::string operator()(bool b) const { return b ? "true" : "false"; }
        std::string operator()(const std::vector<TomlValue>& a) const {
            std::string s = "[";
            for (std::size_t i = 0; i < a.size(); ++i) {
                if (i) s += ", ";
                s += a[i].repr();
            }
            return s + "]";
        }
    };
    return std::visit(V{}, v);
}

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool valid_key(const std::string& k) {
    if (k.empty()) return false;
    for (char c : k)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '-' && c != '.')
            return false;
    return true;
}

TomlValue parse_scalar_token(const std::string& tok);

TomlValue parse_value(const std::string& raw) {
    std::string s = trim(raw);
    if (s.empty()) throw ConfigError("toml: empty value");
    if (s.front() == '[') {
        if (s.back() != ']') throw ConfigError("toml: unterminated array");
        std::vector<TomlValue> items;
        std::string body = s.substr(1, s.size() - 2);
        std::string cur;
        int depth = 0;
        bool in_str = false;
        for (char c : body) {
            if (c == '"') in_str = !in_str;
            if (!in_str) {
                if (c == '[') ++depth;
                if (c == ']') --depth;
                if (c == ',' && depth == 0) {
                    if (!trim(cur).empty()) items.push_back(parse_value(cur));
                    cur.clear();
                    continue;
                }
            }
            cur += c;
        }
        if (!trim(cur).empty()) items.push_back(parse_value(cur));
        return TomlValue{items};
    }
    return parse_scalar_token(s);
}

TomlValue parse_scalar_token(const std::string& s) {
    if (s.front() == '"') {
        if (s.size() < 2 || s.back() != '"') throw ConfigError("toml: unterminated string");
        std::string out;
        for (std::size_t i = 1; i + 1 < s.size(); ++i) {
            char c = s[i];
            if (c == '\\' && i + 2 < s.size()) {
                char n = s[++i];
                switch (n) {
                    case 'n': out += '\n'; break;
                    case 't': out += '\t'; break;
                    case '"': out += '"'; break;
                    case '\\': out += '\\'; break;
                    default: throw ConfigError("toml: unsupported escape");
                }
            } else {
                out += c;
            }
        }
        return TomlValue{out};
    }
    if (s == "true") return TomlValue{true};
    if (s == "false") return TomlValue{false};
    // number: integer when it parses fully without . e E
    bool looks_float = s.find_first_of(".eE") != std::string::npos;
    try {
        std::size_t pos = 0;
        if (!looks_float) {
            std::int64_t i = std::stoll(s, &pos);
            if (pos == s.size()) return TomlValue{i};
        }
        double d = std::stod(s, &pos);
        if (pos == s.size()) return TomlValue{d};
    } catch (const std::exception&) {
    }
    throw ConfigError("toml: cannot parse value '" + s + "'");
}

} // namespace

TomlTable parse_toml(const std::string& text) {
    TomlTable table;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        // strip comments outside strings
        bool in_str = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') in_str = !in_str;
            if (line[i] == '#' && !in_str) {
                line = line.substr(0, i);
                break;
            }
        }
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("toml line " + std::to_string(lineno) +
                                                      ": bad table header");
            section = trim(line.substr(1, line.size() - 2));
            if (!valid_key(section))
                throw ConfigError("toml line " + std::to_string(lineno) + ": bad table name");
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("toml line " + std::to_string(lineno) + ": expected key = value");
        std::string key = trim(line.substr(0, eq));
        if (!valid_key(key))
            throw ConfigError("toml line " + std::to_string(lineno) + ": bad key '" + key + "'");
        std::string path = section.empty() ? key : section + "." + key;
        if (table.count(path))
            throw ConfigError("toml line " + std::to_string(lineno) + ": duplicate key '" + path +
                              "'");
        table.emplace(path, parse_value(line.substr(eq + 1)));
    }
    return table;
}

TomlTable parse_toml_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config '" + path.string() + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_toml(ss.str());
}

TomlValue parse_toml_scalar(const std::string& text) { return parse_value(text); }

// ---------------------------------------------------------------------------
// schema
// ---------------------------------------------------------------------------

namespace {

struct Schema {
    enum class Type { Str, Int, Float, Bool, IntArray };
    std::map<std::string, Type> keys;

    Schema() {
        keys = {
            {"run.seed", Type::Int},
            {"run.workdir", Type::Str},
            {"data.root", Type::Str},
            {"data.patch", Type::Int},
            {"data.require_masks", Type::Bool},
            {"masks.source", Type::Str},
            {"masks.q_ir", Type::Float},
            {"masks.q_vis", Type::Float},
            {"masks.fraction", Type::Float},
            {"masks.seed", Type::Int},
            {"masks.endpoint", Type::Str},
            {"masks.timeout_s", Type::Float},
            {"masks.fallback_synthetic", Type::Bool},
            {"stage1.channels", Type::Int},
            {"stage1.msfem_repeats", Type::Int},
            {"stage1.tb_repeats", Type::Int},
            {"stage1.heads", Type::Int},
            {"stage1.mlp_ratio", Type::Float},
            {"stage1.window", Type::Int},
            {"diffusion.steps", Type::Int},
            {"diffusion.beta_start", Type::Float},
            {"diffusion.beta_end", Type::Float},
            {"diffusion.t_start", Type::Int},
            {"diffusion.feature_timesteps", Type::IntArray},
            {"diffusion.sampling", Type::Str},
            {"unet.depth", Type::Int},
            {"unet.base_width", Type::Int},
            {"unet.max_width", Type::Int},
            {"unet.time_embed_dim", Type::Int},
            {"hfah.taps", Type::Int},
            {"hfah.head_width", Type::Int},
            {"loss.lambda1", Type::Float},
            {"loss.lambda2", Type::Float},
            {"loss.diffusion_weight", Type::Float},
            {"train.lr", Type::Float},
            {"train.batch", Type::Int},
            {"train.stage1_steps", Type::Int},
            {"train.stage2_steps", Type::Int},
            {"train.log_every", Type::Int},
            {"train.checkpoint_dir", Type::Str},
            {"ablation.no_sam", Type::Bool},
            {"ablation.no_ir_mask", Type::Bool},
            {"ablation.no_vis_mask", Type::Bool},
            {"ablation.no_stage1", Type::Bool},
            {"ablation.no_stage2", Type::Bool},
            {"ablation.no_diffusion", Type::Bool},
            {"ablation.no_hfah", Type::Bool},
        };
    }

    void check(const TomlTable& t) const {
        for (const auto& [key, val] : t) {
            auto it = keys.find(key);
            if (it == keys.end()) throw ConfigError("unknown config key '" + key + "'");
            switch (it->second) {
                case Type::Str: val.as_string(); break;
                case Type::Int: val.as_int(); break;
                case Type::Float: val.as_double(); break;
                case Type::Bool: val.as_bool(); break;
                case Type::IntArray:
                    for (const auto& e : val.as_array()) e.as_int();
                    break;
            }
        }
    }
};

const Schema& schema() {
    static Schema s;
    return s;
}

template <typename T, typename F>
void maybe(const TomlTable& t, const std::string& key, T& out, F&& get) {
    auto it = t.find(key);
    if (it != t.end()) out = get(it->second);
}

} // namespace

RunConfig config_from_toml(const TomlTable& table) {
    schema().check(table);
    RunConfig c;
    auto s = [](const TomlValue& v) { return v.as_string(); };
    auto i = [](const TomlValue& v) { return static_cast<int>(v.as_int()); };
    auto u = [](const TomlValue& v) { return static_cast<std::uint64_t>(v.as_int()); };
    auto d = [](const TomlValue& v) { return v.as_double(); };
    auto b = [](const TomlValue& v) { return v.as_bool(); };

    maybe(table, "run.seed", c.seed, u);
    maybe(table, "run.workdir", c.workdir, s);
    maybe(table, "data.root", c.data_root, s);
    maybe(table, "data.patch", c.patch, i);
    maybe(table, "data.require_masks", c.require_masks, b);

    if (auto it = table.find("masks.source"); it != table.end())
        c.masks.kind = MaskSourceConfig::parse_kind(it->second.as_string());
    maybe(table, "masks.q_ir", c.masks.q_ir, d);
    maybe(table, "masks.q_vis", c.masks.q_vis, d);
    maybe(table, "masks.fraction", c.masks.fraction, d);
    maybe(table, "masks.seed", c.masks.seed, u);
    maybe(table, "masks.endpoint", c.masks.endpoint, s);
    maybe(table, "masks.timeout_s", c.masks.timeout_s, d);
    maybe(table, "masks.fallback_synthetic", c.masks.fallback_synthetic, b);

    maybe(table, "stage1.channels", c.stage1.msfem.channels, i);
    maybe(table, "stage1.msfem_repeats", c.stage1.msfem.repeats, i);
    maybe(table, "stage1.tb_repeats", c.stage1.tb.repeats, i);
    maybe(table, "stage1.heads", c.stage1.tb.heads, i);
    maybe(table, "stage1.mlp_ratio", c.stage1.tb.mlp_ratio, d);
    maybe(table, "stage1.window", c.stage1.tb.window, i);
    c.stage1.tb.embed_dim = c.stage1.msfem.channels;

    maybe(table, "diffusion.steps", c.steps, i);
    maybe(table, "diffusion.beta_start", c.beta_start, d);
    maybe(table, "diffusion.beta_end", c.beta_end, d);
    maybe(table, "diffusion.t_start", c.t_start, i);
    if (auto it = table.find("diffusion.feature_timesteps"); it != table.end()) {
        c.feature_timesteps.clear();
        for (const auto& e : it->second.as_array())
            c.feature_timesteps.push_back(static_cast<int>(e.as_int()));
    }
    maybe(table, "diffusion.sampling", c.sampling, s);

    maybe(table, "unet.depth", c.unet_depth, i);
    maybe(table, "unet.base_width", c.unet_base_width, i);
    maybe(table, "unet.max_width", c.unet_max_width, i);
    maybe(table, "unet.time_embed_dim", c.time_embed_dim, i);
    maybe(table, "hfah.taps", c.hfah_taps, i);
    maybe(table, "hfah.head_width", c.hfah_head_width, i);

    maybe(table, "loss.lambda1", c.loss_weights.lambda1, d);
    maybe(table, "loss.lambda2", c.loss_weights.lambda2, d);
    maybe(table, "loss.diffusion_weight", c.diffusion_loss_weight, d);

    maybe(table, "train.lr", c.lr, d);
    maybe(table, "train.batch", c.batch, i);
    maybe(table, "train.stage1_steps", c.stage1_steps, i);
    maybe(table, "train.stage2_steps", c.stage2_steps, i);
    maybe(table, "train.log_every", c.log_every, i);
    maybe(table, "train.checkpoint_dir", c.checkpoint_dir, s);

    maybe(table, "ablation.no_sam", c.ablation.no_sam, b);
    maybe(table, "ablation.no_ir_mask", c.ablation.no_ir_mask, b);
    maybe(table, "ablation.no_vis_mask", c.ablation.no_vis_mask, b);
    maybe(table, "ablation.no_stage1", c.ablation.no_stage1, b);
    maybe(table, "ablation.no_stage2", c.ablation.no_stage2, b);
    maybe(table, "ablation.no_diffusion", c.ablation.no_diffusion, b);
    maybe(table, "ablation.no_hfah", c.ablation.no_hfah, b);

    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path,
                      const std::vector<std::string>& overrides) {
    TomlTable table = parse_toml_file(path);
    for (const std::string& ov : overrides) {
        std::size_t eq = ov.find('=');
        if (eq == std::string::npos)
            throw ConfigError("override '" + ov + "' is not key=value");
        std::string key = trim(ov.substr(0, eq));
        table.erase(key);
        table.emplace(key, parse_toml_scalar(ov.substr(eq + 1)));
    }
    return config_from_toml(table);
}

std::vector<int> RunConfig::resolved_feature_timesteps() const {
    std::vector<int> reference = feature_timesteps.empty() ? std::vector<int>{5, 50, 100}
                                                       : feature_timesteps;
    if (!feature_timesteps.empty()) {
        // explicit values are taken as-is for this schedule
        std::vector<int> out = feature_timesteps;
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }
    return scale_timesteps(reference, steps);
}

int RunConfig::spatial_multiple() const {
    int a = 1 << (unet_depth - 1);
    int b = stage1.tb.window;
    return std::lcm(a, b);
}

void RunConfig::validate() const {
    stage1.validate();
    if (masks.q_ir <= 0.0 || masks.q_ir >= 1.0 || masks.q_vis <= 0.0 || masks.q_vis >= 1.0)
        throw ConfigError("mask quantiles must be in (0,1)");
    if (masks.fraction <= 0.0 || masks.fraction > 1.0)
        throw ConfigError("mask patch fraction must be in (0,1]");
    if (masks.timeout_s <= 0.0) throw ConfigError("mask timeout must be positive");
    if (patch < 8) throw ConfigError("patch must be >= 8");
    if (patch % spatial_multiple() != 0)
        throw ConfigError("patch " + std::to_string(patch) + " must be divisible by " +
                          std::to_string(spatial_multiple()));
    if (steps < 1) throw ConfigError("diffusion.steps must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ConfigError("diffusion betas must satisfy 0 < start <= end < 1");
    if (t_start < 0 || t_start > steps) throw ConfigError("diffusion.t_start out of range");
    for (int t : feature_timesteps)
        if (t < 1 || t > steps) throw ConfigError("feature timestep out of [1,steps]");
    if (sampling != "features" && sampling != "chain")
        throw ConfigError("diffusion.sampling must be 'features' or 'chain'");
    if (unet_depth < 2) throw ConfigError("unet.depth must be >= 2");
    if (hfah_taps < 2 || hfah_taps > unet_depth) throw ConfigError("hfah.taps out of range");
    if (loss_weights.lambda1 < 0 || loss_weights.lambda2 < 0 || diffusion_loss_weight < 0)
        throw ConfigError("loss weights must be non-negative");
    if (batch < 1 || stage1_steps < 0 || stage2_steps < 0)
        throw ConfigError("train counts must be positive");
    if (lr < 0) throw ConfigError("train.lr must be non-negative");
}

std::string config_to_toml(const RunConfig& c) {
    std::ostringstream o;
    o.precision(17);
    auto vs = [](const std::string& s) { return "\"" + s + "\""; };
    o << "[run]\n";
    o << "seed = " << c.seed << "\n";
    o << "workdir = " << vs(c.workdir) << "\n";
    o << "[data]\n";
    o << "root = " << vs(c.data_root) << "\n";
    o << "patch = " << c.patch << "\n";
    o << "require_masks = " << (c.require_masks ? "true" : "false") << "\n";
    o << "[masks]\n";
    const char* kind = "synthetic";
    switch (c.masks.kind) {
        case MaskSourceConfig::Kind::File: kind = "file"; break;
        case MaskSourceConfig::Kind::Synthetic: kind = "synthetic"; break;
        case MaskSourceConfig::Kind::Remote: kind = "remote"; break;
        case MaskSourceConfig::Kind::RandomPatch: kind = "random_patch"; break;
    }
    o << "source = " << vs(kind) << "\n";
    o << "q_ir = " << c.masks.q_ir << "\n";
    o << "q_vis = " << c.masks.q_vis << "\n";
    o << "fraction = " << c.masks.fraction << "\n";
    o << "seed = " << c.masks.seed << "\n";
    o << "endpoint = " << vs(c.masks.endpoint) << "\n";
    o << "timeout_s = " << c.masks.timeout_s << "\n";
    o << "fallback_synthetic = " << (c.masks.fallback_synthetic ? "true" : "false") << "\n";
    o << "[stage1]\n";
    o << "channels = " << c.stage1.msfem.channels << "\n";
    o << "msfem_repeats = " << c.stage1.msfem.repeats << "\n";
    o << "tb_repeats = " << c.stage1.tb.repeats << "\n";
    o << "heads = " << c.stage1.tb.heads << "\n";
    o << "mlp_ratio = " << c.stage1.tb.mlp_ratio << "\n";
    o << "window = " << c.stage1.tb.window << "\n";
    o << "[diffusion]\n";
    o << "steps = " << c.steps << "\n";
    o << "beta_start = " << c.beta_start << "\n";
    o << "beta_end = " << c.beta_end << "\n";
    o << "t_start = " << c.t_start << "\n";
    o << "feature_timesteps = [";
    for (std::size_t i = 0; i < c.feature_timesteps.size(); ++i) {
        if (i) o << ", ";
        o << c.feature_timesteps[i];
    }
    o << "]\n";
    o << "sampling = " << vs(c.sampling) << "\n";
    o << "[unet]\n";
    o << "depth = " << c.unet_depth << "\n";
    o << "base_width = " << c.unet_base_width << "\n";
    o << "max_width = " << c.unet_max_width << "\n";
    o << "time_embed_dim = " << c.time_embed_dim << "\n";
    o << "[hfah]\n";
    o << "taps = " << c.hfah_taps << "\n";
    o << "head_width = " << c.hfah_head_width << "\n";
    o << "[loss]\n";
    o << "lambda1 = " << c.loss_weights.lambda1 << "\n";
    o << "lambda2 = " << c.loss_weights.lambda2 << "\n";
    o << "diffusion_weight = " << c.diffusion_loss_weight << "\n";
    o << "[train]\n";
    o << "lr = " << c.lr << "\n";
    o << "batch = " << c.batch << "\n";
    o << "stage1_steps = " << c.stage1_steps << "\n";
    o << "stage2_steps = " << c.stage2_steps << "\n";
    o << "log_every = " << c.log_every << "\n";
    o << "checkpoint_dir = " << vs(c.checkpoint_dir) << "\n";
    o << "[ablation]\n";
    o << "no_sam = " << (c.ablation.no_sam ? "true" : "false") << "\n";
    o << "no_ir_mask = " << (c.ablation.no_ir_mask ? "true" : "false") << "\n";
    o << "no_vis_mask = " << (c.ablation.no_vis_mask ? "true" : "false") << "\n";
    o << "no_stage1 = " << (c.ablation.no_stage1 ? "true" : "false") << "\n";
    o << "no_stage2 = " << (c.ablation.no_stage2 ? "true" : "false") << "\n";
    o << "no_diffusion = " << (c.ablation.no_diffusion ? "true" : "false") << "\n";
    o << "no_hfah = " << (c.ablation.no_hfah ? "true" : "false") << "\n";
    return o.str();
}

std::string config_digest(const RunConfig& cfg) { return sha256_hex(config_to_toml(cfg)); }

} // namespace sgdfuse
