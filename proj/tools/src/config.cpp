#include "config.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "vcdm/errors.hpp"

namespace vcdm::cli {

namespace {

using T = ValueType;

std::vector<KeySpec> build_schema() {
    return {
        {"seed", T::kInt, "0", {}, "run seed; overridden by --seed"},
        {"method", T::kEnum, "vcdm", {"vcdm", "edm", "class-cond", "oracle"}, "sampling method; overridden by --method"},
        {"out_dir", T::kPath, "runs", {}, "artifact root; overridden by --out"},

        {"dataset.kind", T::kEnum, "ring", {"ring", "manifest"}, "2-D ring toy or an image manifest"},
        {"dataset.manifest", T::kPath, "", {}, "JSON-lines manifest (dataset.kind = manifest)"},
        {"ring.modes", T::kInt, "8", {}, ""},
        {"ring.radius", T::kDouble, "2", {}, ""},
        {"ring.spread", T::kDouble, "0.2", {}, ""},
        {"ring.onehot_noise", T::kDouble, "0.05", {}, ""},
        {"ring.offset_scale", T::kDouble, "0.3", {}, ""},
        {"ring.offset_noise", T::kDouble, "0.3", {}, ""},
        {"ring.n_train", T::kInt, "20000", {}, ""},
        {"ring.n_reference", T::kInt, "50000", {}, ""},
        {"ring.data_seed", T::kInt, "0", {}, "seed of the generated ring data"},

        {"embedder.backend", T::kEnum, "proxy", {"proxy", "clip_vit_b32"}, ""},
        {"embedder.proxy_dim", T::kInt, "64", {}, ""},
        {"augment.enabled", T::kBool, "false", {}, "augment images and feed the label to both models"},
        {"augment.aux_copies", T::kInt, "1", {}, "augmented embedding copies per image for the prior"},

        {"aux.token_dim", T::kInt, "512", {}, ""},
        {"aux.layers", T::kInt, "6", {}, ""},
        {"aux.heads", T::kInt, "8", {}, ""},
        {"aux.sigma_features", T::kInt, "64", {}, ""},
        {"aux.class_conditional", T::kBool, "false", {}, "condition the prior on manifest class labels"},
        {"aux.null_class_prob", T::kDouble, "0.1", {}, ""},
        {"aux.steps", T::kInt, "2000", {}, ""},
        {"aux.batch", T::kInt, "64", {}, ""},
        {"aux.lr", T::kDouble, "1e-4", {}, ""},
        {"aux.ema", T::kDouble, "0.9999", {}, ""},

        {"image.arch", T::kEnum, "unet", {"unet", "mlp"}, ""},
        {"image.base_width", T::kInt, "32", {}, ""},
        {"image.channel_mults", T::kIntList, "1,2,2", {}, ""},
        {"image.mlp_width", T::kInt, "128", {}, ""},
        {"image.mlp_blocks", T::kInt, "3", {}, ""},
        {"image.sigma_features", T::kInt, "64", {}, ""},
        {"image.class_conditional", T::kBool, "false", {}, "light conditioning on manifest class labels"},
        {"image.steps", T::kInt, "2000", {}, ""},
        {"image.batch", T::kInt, "64", {}, ""},
        {"image.lr", T::kDouble, "1e-4", {}, ""},
        {"image.ema", T::kDouble, "0.9999", {}, ""},
        {"finetune.base", T::kPath, "", {}, "unconditional checkpoint to finetune from"},
        {"cluster.k", T::kInt, "8", {}, "K for the class-cond baseline"},

        {"train.checkpoint_every", T::kInt, "500", {}, ""},
        {"train.keep_last", T::kInt, "3", {}, ""},

        {"stage1.steps", T::kInt, "64", {}, ""},
        {"stage1.stochastic", T::kBool, "false", {}, ""},
        {"stage1.churn", T::kDouble, "0", {}, ""},
        {"stage1.noise", T::kDouble, "1", {}, ""},
        {"stage1.tmin", T::kDouble, "0.05", {}, ""},
        {"stage1.tmax", T::kDouble, "50", {}, ""},
        {"stage2.steps", T::kInt, "40", {}, ""},
        {"stage2.stochastic", T::kBool, "true", {}, ""},
        {"stage2.churn", T::kDouble, "50", {}, ""},
        {"stage2.noise", T::kDouble, "1.007", {}, ""},
        {"stage2.tmin", T::kDouble, "0.05", {}, ""},
        {"stage2.tmax", T::kDouble, "50", {}, ""},
        {"schedule.sigma_min", T::kDouble, "0.002", {}, ""},
        {"schedule.sigma_max", T::kDouble, "80", {}, ""},
        {"schedule.rho", T::kDouble, "7", {}, ""},

        {"sample.count", T::kInt, "16", {}, "overridden by --count"},
        {"sample.class", T::kInt, "-1", {}, "light conditioning a; -1 for none"},
        {"sample.chunk", T::kInt, "256", {}, ""},

        {"eval.n", T::kInt, "5000", {}, ""},
        {"eval.extractor", T::kEnum, "auto", {"auto", "identity", "proxy", "inception_v3_external"},
         "auto: identity for the ring, proxy for images"},
        {"eval.shrinkage", T::kDouble, "0", {}, ""},

        {"sweep.arm", T::kEnum, "pca", {"pca", "kmeans"}, ""},
        {"sweep.grid", T::kIntList, "1,2,4,8", {}, ""},
        {"sweep.budgets", T::kIntList, "50,400", {}, ""},
    };
}

const std::set<std::string> kUnhashed = {"seed", "method", "out_dir", "sample.count"};

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

bool parse_long(const std::string& s, long& out) {
    const char* end = s.data() + s.size();
    auto [p, ec] = std::from_chars(s.data(), end, out);
    return ec == std::errc() && p == end;
}

bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    char* end = nullptr;
    errno = 0;
    out = std::strtod(s.c_str(), &end);
    return errno == 0 && end == s.c_str() + s.size() && std::isfinite(out);
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Returns the canonical spelling of value for spec, or throws.
std::string normalise(const KeySpec& spec, const std::string& raw) {
    const std::string v = trim(raw);
    auto fail = [&](const std::string& what) {
        throw ConfigError("config key '" + spec.key + "': " + what + " (got '" + v + "')");
    };
    switch (spec.type) {
        case T::kInt: {
            long x;
            if (!parse_long(v, x)) fail("expected an integer");
            return std::to_string(x);
        }
        case T::kDouble: {
            double x;
            if (!parse_double(v, x)) fail("expected a finite number");
            return format_double(x);
        }
        case T::kBool:
            if (v == "true" || v == "1" || v == "yes" || v == "on") return "true";
            if (v == "false" || v == "0" || v == "no" || v == "off") return "false";
            fail("expected true or false");
            break;
        case T::kEnum:
            if (std::find(spec.choices.begin(), spec.choices.end(), v) == spec.choices.end()) {
                std::string list;
                for (const auto& c : spec.choices) list += (list.empty() ? "" : ", ") + c;
                fail("expected one of {" + list + "}");
            }
            return v;
        case T::kIntList: {
            std::string out;
            std::stringstream ss(v);
            std::string item;
            while (std::getline(ss, item, ',')) {
                long x;
                if (!parse_long(trim(item), x)) fail("expected a comma-separated integer list");
                out += (out.empty() ? "" : ",") + std::to_string(x);
            }
            if (out.empty()) fail("expected a non-empty integer list");
            return out;
        }
        case T::kString:
        case T::kPath:
            if (v.find('\n') != std::string::npos) fail("value spans lines");
            return v;
    }
    return v;
}

}  // namespace

const std::vector<KeySpec>& schema() {
    static const std::vector<KeySpec> s = build_schema();
    return s;
}

std::string sha256_hex(const std::string& data) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error(ErrorKind::kIo, "SHA-256 digest failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

ExperimentConfig::ExperimentConfig() {
    for (const auto& s : schema()) values_[s.key] = normalise(s, s.default_value);
}

const KeySpec& ExperimentConfig::spec(const std::string& key) const {
    for (const auto& s : schema())
        if (s.key == key) return s;
    throw ConfigError("unknown config key '" + key + "'");
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
    values_[key] = normalise(spec(key), value);
}

ExperimentConfig ExperimentConfig::parse(const std::string& text, const std::string& origin) {
    ExperimentConfig cfg;
    std::set<std::string> seen;
    std::stringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto where = origin + ":" + std::to_string(lineno) + ": ";
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        if (!seen.insert(key).second) throw ConfigError(where + "duplicate key '" + key + "'");
        try {
            cfg.set(key, line.substr(eq + 1));
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
}

long ExperimentConfig::get_int(const std::string& key) const {
    if (spec(key).type != T::kInt) throw ConfigError("config key '" + key + "' is not an integer");
    return std::stol(values_.at(key));
}

double ExperimentConfig::get_double(const std::string& key) const {
    if (spec(key).type != T::kDouble) throw ConfigError("config key '" + key + "' is not a number");
    return std::stod(values_.at(key));
}

bool ExperimentConfig::get_bool(const std::string& key) const {
    if (spec(key).type != T::kBool) throw ConfigError("config key '" + key + "' is not a boolean");
    return values_.at(key) == "true";
}

const std::string& ExperimentConfig::get_string(const std::string& key) const {
    spec(key);
    return values_.at(key);
}

std::vector<long> ExperimentConfig::get_int_list(const std::string& key) const {
    if (spec(key).type != T::kIntList) throw ConfigError("config key '" + key + "' is not an integer list");
    std::vector<long> out;
    std::stringstream ss(values_.at(key));
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stol(item));
    return out;
}

std::string ExperimentConfig::canonical() const {
    std::string out;
    for (const auto& s : schema()) out += s.key + "=" + values_.at(s.key) + "\n";
    return out;
}

std::string ExperimentConfig::hash_of(const std::vector<std::string>& keys, const std::string& salt) const {
    std::string text = salt + "\n";
    for (const auto& s : schema())
        if (std::find(keys.begin(), keys.end(), s.key) != keys.end()) text += s.key + "=" + values_.at(s.key) + "\n";
    return sha256_hex(text).substr(0, 16);
}

std::string ExperimentConfig::hash() const {
    std::vector<std::string> keys;
    for (const auto& s : schema())
        if (!kUnhashed.count(s.key)) keys.push_back(s.key);
    return hash_of(keys, "config");
}

std::vector<std::string> ExperimentConfig::keys_with_prefix(const std::vector<std::string>& prefixes) const {
    std::vector<std::string> out;
    for (const auto& s : schema())
        for (const auto& p : prefixes)
            if (s.key.rfind(p, 0) == 0) {
                out.push_back(s.key);
                break;
            }
    return out;
}

}  // namespace vcdm::cli
