#include "l2aed/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>

#include "l2aed/errors.hpp"

namespace l2aed {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string env_name(const std::string& key) {
    std::string out = "L2AED_";
    for (char c : key) out += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace

const std::vector<RunConfig::KeyInfo>& RunConfig::keys() {
    static const std::vector<KeyInfo> k = {
        {"seed", "1", "base seed for initialization, episode sampling, dropout and evaluation"},
        {"out_dir", "runs/l2aed", "output directory"},
        {"dataset", "synth", "synth | images | cache"},
        {"data_seed", "0", "seed for synthetic data generation and class splits"},
        {"image_root", "", "images: directory tree root/<class>/<image>.png"},
        {"dataset_cache", "", "cache: dataset container to load"},
        {"write_cache", "", "if set, the built dataset is saved here"},
        {"image_size", "28", "images are resized to image_size x image_size"},
        {"grayscale", "true", "images: collapse colour to luminance"},
        {"invert", "false", "images: map v -> 1 - v"},
        {"rotate_augment", "false", "images: add 90/180/270 degree rotations as new classes"},
        {"split_train", "0", "images: meta-train class count"},
        {"split_validation", "0", "images: meta-validation class count"},
        {"split_test", "0", "images: meta-test class count"},
        {"synth_train_classes", "20", "synth: meta-train classes"},
        {"synth_validation_classes", "5", "synth: meta-validation classes"},
        {"synth_test_classes", "5", "synth: meta-test classes"},
        {"synth_per_class", "20", "synth: examples per class"},
        {"synth_noise_sd", "0.1", "synth: per-pixel Gaussian noise"},
        {"synth_outlier_rate", "0", "synth: probability an example is drawn from another class"},
        {"ways", "5", "classes per episode"},
        {"shots", "1", "support examples per class"},
        {"queries", "5", "query examples per class"},
        {"aggregation", "l2ae", "l2ae | mean-baseline"},
        {"last_pool", "false", "keep the max-pool of the last embedding block"},
        {"embed_filters", "64", "filters per embedding block"},
        {"attention_filters", "32", "filters per attention block"},
        {"m_max", "0", "attention FC width; 0 means max(ways, shots)"},
        {"oneshot_softmax", "false", "apply softmax to 1-shot aggregation weights"},
        {"attention_init", "he", "he | zero (zero sets the attention FC to 0)"},
        {"episodes", "2000", "training episodes"},
        {"meta_batch", "4", "episodes per optimizer step"},
        {"lr", "0.001", "initial Adam learning rate"},
        {"lr_halving_period", "20000", "halve the learning rate every this many episodes"},
        {"validation_period", "1000", "validate every this many episodes"},
        {"validation_tasks", "200", "episodes per validation (0 disables)"},
        {"keep", "1.0", "meta-level dropout keep probability (1.0 disables)"},
        {"eval_tasks", "600", "test episodes per evaluation seed"},
        {"eval_seeds", "10", "number of evaluation seeds"},
        {"dump_split", "test", "split sampled by dump-embeddings"},
    };
    return k;
}

RunConfig::RunConfig() {
    for (const auto& k : keys()) values_[k.key] = k.default_value;
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
}

RunConfig RunConfig::parse(std::istream& is, const std::string& origin) {
    RunConfig cfg;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        if (!cfg.values_.count(key)) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown config key '" + key + "'");
        }
        cfg.values_[key] = trim(line.substr(eq + 1));
    }
    return cfg;
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config '" + path.string() + "'");
    return parse(is, path.string());
}

void RunConfig::apply_env() {
    for (auto& [key, value] : values_) {
        if (const char* v = std::getenv(env_name(key).c_str())) value = v;
    }
}

const std::string& RunConfig::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

long long RunConfig::get_int(const std::string& key) const {
    const std::string& v = get(key);
    try {
        std::size_t used = 0;
        const long long out = std::stoll(v, &used);
        if (used == v.size()) return out;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "' expects an integer, got '" + v + "'");
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
    const std::string& v = get(key);
    try {
        std::size_t used = 0;
        const unsigned long long out = std::stoull(v, &used);
        if (used == v.size() && !v.empty() && v[0] != '-') return out;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
}

double RunConfig::get_double(const std::string& key) const {
    const std::string& v = get(key);
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used == v.size()) return out;
    } catch (const std::exception&) {
    }
    throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "' expects true or false, got '" + v + "'");
}

void RunConfig::write_resolved(std::ostream& os) const {
    os << "# resolved l2aed run configuration\n";
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
}

namespace {

std::size_t positive(const RunConfig& c, const std::string& key, bool allow_zero = false) {
    const long long v = c.get_int(key);
    if (v < 0 || (!allow_zero && v == 0)) {
        throw ConfigError("config key '" + key + "' must be " + (allow_zero ? "non-negative" : "positive"));
    }
    return static_cast<std::size_t>(v);
}

}  // namespace

EpisodeSpec RunConfig::episode_spec(Split split) const {
    EpisodeSpec s{positive(*this, "ways"), positive(*this, "shots"), positive(*this, "queries"), split};
    try {
        s.validate();
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    return s;
}

EpisodeOptions RunConfig::episode_options() const {
    EpisodeOptions o;
    try {
        o.aggregation = parse_aggregation(get("aggregation"));
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    o.oneshot_softmax = get_bool("oneshot_softmax");
    return o;
}

TrainConfig RunConfig::train_config() const {
    TrainConfig t;
    t.spec = episode_spec(Split::Train);
    t.meta_batch = positive(*this, "meta_batch");
    t.learning_rate = get_double("lr");
    t.lr_halving_period = positive(*this, "lr_halving_period");
    t.total_episodes = positive(*this, "episodes", true);
    t.validation_period = positive(*this, "validation_period");
    t.validation_tasks = positive(*this, "validation_tasks", true);
    t.keep = get_double("keep");
    t.seed = get_u64("seed");
    t.options = episode_options();
    try {
        t.validate();
    } catch (const ParameterError& e) {
        throw ConfigError(e.what());
    }
    return t;
}

ModelConfig RunConfig::model_config(std::size_t channels) const {
    ModelConfig m;
    m.in_channels = channels;
    m.image_size = positive(*this, "image_size");
    m.last_pool = get_bool("last_pool");
    m.embed_filters = positive(*this, "embed_filters");
    m.attention_filters = positive(*this, "attention_filters");
    const std::size_t ways = positive(*this, "ways"), shots = positive(*this, "shots");
    m.m_max = positive(*this, "m_max", true);
    if (m.m_max == 0) m.m_max = std::max(ways, shots);
    const std::size_t need = shots == 1 ? ways : shots;
    if (m.m_max < need) {
        throw ConfigError("m_max=" + std::to_string(m.m_max) + " cannot hold stacks of " + std::to_string(need) +
                          " maps");
    }
    const std::string init = get("attention_init");
    if (init != "he" && init != "zero") throw ConfigError("attention_init must be he or zero");
    try {
        m.validate();
    } catch (const Error& e) {
        throw ConfigError(e.what());
    }
    return m;
}

Dataset RunConfig::build_dataset() const {
    const std::string kind = get("dataset");
    const std::uint64_t data_seed = get_u64("data_seed");
    Dataset ds;
    if (kind == "synth") {
        SynthParams p;
        const std::size_t tr = positive(*this, "synth_train_classes");
        const std::size_t va = positive(*this, "synth_validation_classes", true);
        const std::size_t te = positive(*this, "synth_test_classes", true);
        p.num_classes = tr + va + te;
        p.per_class = positive(*this, "synth_per_class");
        p.image_size = positive(*this, "image_size");
        p.noise_sd = get_double("synth_noise_sd");
        p.outlier_rate = get_double("synth_outlier_rate");
        p.seed = derive_seed(data_seed, streams::kSynth);
        try {
            ds = synth_dataset(p);
        } catch (const ParameterError& e) {
            throw ConfigError(e.what());
        }
        Rng rng(derive_seed(data_seed, streams::kSplit));
        ds = split_classes(std::move(ds), SplitCounts{tr, va, te}, rng);
    } else if (kind == "images") {
        const std::string root = get("image_root");
        if (root.empty()) throw ConfigError("dataset = images requires image_root");
        ds = load_image_dataset(root, positive(*this, "image_size"), get_bool("grayscale"), get_bool("invert"));
        const SplitCounts counts{positive(*this, "split_train", true), positive(*this, "split_validation", true),
                                 positive(*this, "split_test", true)};
        if (counts.train + counts.validation + counts.test != ds.classes.size()) {
            throw ConfigError("split_train + split_validation + split_test must equal the " +
                              std::to_string(ds.classes.size()) + " classes found under " + root);
        }
        Rng rng(derive_seed(data_seed, streams::kSplit));
        ds = split_classes(std::move(ds), counts, rng);
        if (get_bool("rotate_augment")) ds = augment_rotations(ds);
    } else if (kind == "cache") {
        const std::string path = get("dataset_cache");
        if (path.empty()) throw ConfigError("dataset = cache requires dataset_cache");
        ds = load_dataset(path);
    } else {
        throw ConfigError("dataset must be synth, images or cache, got '" + kind + "'");
    }
    if (const std::string& out = get("write_cache"); !out.empty()) save_dataset(out, ds);
    return ds;
}

}  // namespace l2aed
