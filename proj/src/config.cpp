#include "unetsharp/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace unetsharp {

const std::vector<ConfigKey>& config_keys()
{
    static const std::vector<ConfigKey> keys{
        {"arch.depth", "5", "number of resolution levels"},
        {"arch.channels", "32,64,128,256,512", "node width per level"},
        {"arch.convs_per_node", "2", "3x3 conv-bn-relu stages per node"},
        {"arch.upsample_mode", "bilinear", "bilinear or nearest"},
        {"arch.input_channels", "1", "image channels (1 or 3)"},
        {"arch.input_size", "64", "square input extent, divisible by 2^(depth-1)"},
        {"arch.deep_double_convs", "false", "double the stages of levels 2 and deeper"},
        {"loss.alpha", "0.25", "focal class weight"},
        {"loss.beta", "2", "focal exponent"},
        {"loss.weights", "0.5,1,0.5", "focal, dice and hinge weights"},
        {"loss.focal_positive_only", "false", "positive-class focal term on every pixel"},
        {"train.lr0", "0.001", "initial learning rate"},
        {"train.lr_min", "0", "final learning rate of the cosine schedule"},
        {"train.epochs", "30", "passes over the training split"},
        {"train.batch", "8", "mini-batch size"},
        {"train.seed", "0", "initialization, shuffling, augmentation and dropout seed"},
        {"train.weight_decay", "0.0001", "decoupled weight decay"},
        {"train.cgm", "true", "attach presence gates to every head"},
        {"train.cgm_weight", "0.25", "weight of the mean gate cross-entropy"},
        {"train.deep_supervision", "true", "supervise every branch, else only (0,depth-1)"},
        {"train.augment", "true", "rotation, flip and intensity jitter"},
        {"train.level", "-1", "train only the sub-grid of this level (-1: full grid)"},
        {"train.val_fraction", "0.2", "validation share of the dataset"},
        {"train.eval_batch", "8", "images per evaluation forward pass"},
        {"data.dir", "", "dataset directory with images/ and masks/"},
        {"data.split_seed", "0", "seed of the train/validation shuffle"},
    };
    return keys;
}

namespace {

std::string trim(const std::string& s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& v)
{
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(trim(item));
    return out;
}

template <typename V>
V parse_number(const std::string& key, const std::string& v)
{
    V out{};
    const char* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end || v.empty()) throw ConfigError("config: bad value '" + v + "' for " + key);
    return out;
}

bool parse_bool(const std::string& key, const std::string& v)
{
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config: bad boolean '" + v + "' for " + key);
}

std::string fmt(double v)
{
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

void apply(TrainConfig& c, const std::string& key, const std::string& v)
{
    if (key == "arch.depth") {
        c.arch.depth = parse_number<int>(key, v);
    } else if (key == "arch.channels") {
        c.arch.channels.clear();
        for (const auto& item : split_list(v)) c.arch.channels.push_back(parse_number<Index>(key, item));
    } else if (key == "arch.convs_per_node") {
        c.arch.convs_per_node = parse_number<int>(key, v);
    } else if (key == "arch.upsample_mode") {
        if (v == "bilinear") {
            c.arch.upsample_mode = UpsampleMode::Bilinear;
        } else if (v == "nearest") {
            c.arch.upsample_mode = UpsampleMode::Nearest;
        } else {
            throw ConfigError("config: upsample_mode must be bilinear or nearest, got '" + v + "'");
        }
    } else if (key == "arch.input_channels") {
        c.arch.input_channels = parse_number<Index>(key, v);
    } else if (key == "arch.input_size") {
        c.arch.input_size = parse_number<Index>(key, v);
    } else if (key == "arch.deep_double_convs") {
        c.arch.deep_double_convs = parse_bool(key, v);
    } else if (key == "loss.alpha") {
        c.loss.alpha = parse_number<double>(key, v);
    } else if (key == "loss.beta") {
        c.loss.beta = parse_number<double>(key, v);
    } else if (key == "loss.weights") {
        const auto items = split_list(v);
        if (items.size() != 3) throw ConfigError("config: loss.weights needs three comma-separated values");
        c.loss.w_focal = parse_number<double>(key, items[0]);
        c.loss.w_dice = parse_number<double>(key, items[1]);
        c.loss.w_lovasz = parse_number<double>(key, items[2]);
    } else if (key == "loss.focal_positive_only") {
        c.loss.focal_positive_only = parse_bool(key, v);
    } else if (key == "train.lr0") {
        c.lr0 = parse_number<double>(key, v);
    } else if (key == "train.lr_min") {
        c.lr_min = parse_number<double>(key, v);
    } else if (key == "train.epochs") {
        c.epochs = parse_number<int>(key, v);
    } else if (key == "train.batch") {
        c.batch = parse_number<int>(key, v);
    } else if (key == "train.seed") {
        c.seed = parse_number<std::uint64_t>(key, v);
    } else if (key == "train.weight_decay") {
        c.weight_decay = parse_number<double>(key, v);
    } else if (key == "train.cgm") {
        c.cgm = parse_bool(key, v);
    } else if (key == "train.cgm_weight") {
        c.cgm_weight = parse_number<double>(key, v);
    } else if (key == "train.deep_supervision") {
        c.deep_supervision = parse_bool(key, v);
    } else if (key == "train.augment") {
        c.augment = parse_bool(key, v);
    } else if (key == "train.level") {
        c.level = parse_number<int>(key, v);
    } else if (key == "train.val_fraction") {
        c.val_fraction = parse_number<double>(key, v);
    } else if (key == "train.eval_batch") {
        c.eval_batch = parse_number<int>(key, v);
    } else if (key == "data.dir") {
        c.data_dir = v;
    } else if (key == "data.split_seed") {
        c.split_seed = parse_number<std::uint64_t>(key, v);
    } else {
        throw ConfigError("config: unknown key '" + key + "'");
    }
}

} // namespace

TrainConfig parse_config(const std::string& text)
{
    TrainConfig c;
    std::set<std::string> seen;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!seen.insert(key).second) {
            throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        }
        try {
            apply(c, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    try {
        c.validate();
    } catch (const ArgumentError& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

TrainConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string format_config(const TrainConfig& c)
{
    std::ostringstream os;
    const auto b = [](bool v) { return v ? "true" : "false"; };
    os << "arch.depth=" << c.arch.depth << '\n';
    os << "arch.channels=";
    for (std::size_t i = 0; i < c.arch.channels.size(); ++i) os << (i ? "," : "") << c.arch.channels[i];
    os << '\n';
    os << "arch.convs_per_node=" << c.arch.convs_per_node << '\n';
    os << "arch.upsample_mode=" << (c.arch.upsample_mode == UpsampleMode::Bilinear ? "bilinear" : "nearest") << '\n';
    os << "arch.input_channels=" << c.arch.input_channels << '\n';
    os << "arch.input_size=" << c.arch.input_size << '\n';
    os << "arch.deep_double_convs=" << b(c.arch.deep_double_convs) << '\n';
    os << "loss.alpha=" << fmt(c.loss.alpha) << '\n';
    os << "loss.beta=" << fmt(c.loss.beta) << '\n';
    os << "loss.weights=" << fmt(c.loss.w_focal) << ',' << fmt(c.loss.w_dice) << ',' << fmt(c.loss.w_lovasz) << '\n';
    os << "loss.focal_positive_only=" << b(c.loss.focal_positive_only) << '\n';
    os << "train.lr0=" << fmt(c.lr0) << '\n';
    os << "train.lr_min=" << fmt(c.lr_min) << '\n';
    os << "train.epochs=" << c.epochs << '\n';
    os << "train.batch=" << c.batch << '\n';
    os << "train.seed=" << c.seed << '\n';
    os << "train.weight_decay=" << fmt(c.weight_decay) << '\n';
    os << "train.cgm=" << b(c.cgm) << '\n';
    os << "train.cgm_weight=" << fmt(c.cgm_weight) << '\n';
    os << "train.deep_supervision=" << b(c.deep_supervision) << '\n';
    os << "train.augment=" << b(c.augment) << '\n';
    os << "train.level=" << c.level << '\n';
    os << "train.val_fraction=" << fmt(c.val_fraction) << '\n';
    os << "train.eval_batch=" << c.eval_batch << '\n';
    os << "data.dir=" << c.data_dir << '\n';
    os << "data.split_seed=" << c.split_seed << '\n';
    return os.str();
}

} // namespace unetsharp
