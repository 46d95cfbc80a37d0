#include "tresnet/config.hpp"

#include <fstream>
#include <sstream>

namespace tresnet {

namespace {

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream is(s);
    std::string item;
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

double parse_real(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse real number from '" + value + "'");
    }
}

std::int64_t parse_int(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse integer from '" + value + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    try {
        std::size_t pos = 0;
        const unsigned long long v = std::stoull(value, &pos);
        if (pos != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse unsigned integer from '" + value + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& value) {
    if (value == "true" || value == "1") return true;
    if (value == "false" || value == "0") return false;
    throw ConfigError("key '" + key + "': expected true|false, got '" + value + "'");
}

}  // namespace

RunConfig RunConfig::parse_entries(const std::map<std::string, std::string>& entries) {
    RunConfig cfg;
    for (const auto& [key, value] : entries) {
        if (key == "dgp") cfg.dgp = value;
        else if (key == "csv") cfg.csv_path = value;
        else if (key == "n") cfg.n = parse_int(key, value);
        else if (key == "noise_sd") cfg.noise_sd = parse_real(key, value);
        else if (key == "data_seed") { cfg.data_seed = parse_u64(key, value); cfg.data_seed_set = true; }
        else if (key == "family") cfg.model.family = family_from_name(value);
        else if (key == "data_family") { cfg.data_family = value; (void)family_from_name(value); }
        else if (key == "shifts") cfg.shifts_raw = value;
        else if (key == "backbone_layers") cfg.model.backbone_layers = static_cast<int>(parse_int(key, value));
        else if (key == "backbone_width") cfg.model.backbone_width = static_cast<int>(parse_int(key, value));
        else if (key == "head_hidden_layers") cfg.model.head_hidden_layers = static_cast<int>(parse_int(key, value));
        else if (key == "head_width") cfg.model.head_width = static_cast<int>(parse_int(key, value));
        else if (key == "basis") cfg.model.basis = basis_from_name(value);
        else if (key == "ratio_clamp") cfg.model.ratio_clamp = parse_real(key, value);
        else if (key == "lr") cfg.train.learning_rate = parse_real(key, value);
        else if (key == "beta1") cfg.train.beta1 = parse_real(key, value);
        else if (key == "beta2") cfg.train.beta2 = parse_real(key, value);
        else if (key == "epochs") cfg.train.epochs = static_cast<int>(parse_int(key, value));
        else if (key == "batch_size") cfg.train.batch_size = static_cast<int>(parse_int(key, value));
        else if (key == "alpha") cfg.train.alpha = parse_real(key, value);
        else if (key == "beta0") cfg.train.beta0 = parse_real(key, value);
        else if (key == "detach_ratio_in_tr") cfg.train.detach_ratio_in_tr = parse_bool(key, value);
        else if (key == "tr_mode") cfg.train.tr_mode = tr_mode_from_name(value);
        else if (key == "seed") cfg.train.seed = parse_u64(key, value);
        else if (key == "model") cfg.model_path = value;
        else if (key == "estimators") cfg.estimators = split_list(value);
        else if (key == "n_seeds") cfg.n_seeds = static_cast<int>(parse_int(key, value));
        else if (key == "dgps") cfg.dgps = split_list(value);
        else if (key == "families") cfg.families = split_list(value);
        else if (key == "bases") cfg.bases = split_list(value);
        else if (key == "ensemble_b") cfg.ensemble_b = static_cast<std::size_t>(parse_int(key, value));
        else if (key == "out") cfg.out_dir = value;
        else throw ConfigError("unknown config key '" + key + "'");
    }
    if (!cfg.dgp.empty() && !cfg.csv_path.empty()) {
        throw ConfigError("config sets both 'dgp' and 'csv'; pick one dataset source");
    }
    return cfg;
}

RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::map<std::string, std::string> entries;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": expected key=value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(path + ":" + std::to_string(line_no) + ": empty key");
        if (entries.count(key)) {
            throw ConfigError(path + ":" + std::to_string(line_no) + ": duplicate key '" + key + "'");
        }
        entries[key] = value;
    }
    return parse_entries(entries);
}

}  // namespace tresnet
