#include "unetsharp/supervision.hpp"

#include <regex>

namespace unetsharp {

std::vector<BranchSpec> branch_specs(const ArchGraph& full_grid)
{
    const int D = full_grid.config().depth;
    if (full_grid.level() != D - 1) throw ContractError("branch_specs: expects the unpruned grid");
    const auto& ch = full_grid.config().channels;
    std::vector<BranchSpec> out;
    for (int j = 1; j < D; ++j) {
        BranchSpec b;
        b.source = {0, j};
        b.name = (j == D - 1 ? "de_0_" : "in_0_") + std::to_string(j);
        b.family = BranchFamily::In;
        b.head_kernel = 1;
        b.gt_scale = 1;
        b.cgm = CgmVariant::Simplified;
        b.channels = ch[0];
        out.push_back(b);
    }
    for (int i = 1; i < D; ++i) {
        BranchSpec b;
        b.source = {i, D - 1 - i};
        b.name = (i == D - 1 ? "en_" : "de_") + std::to_string(i) + "_" + std::to_string(D - 1 - i);
        b.family = BranchFamily::De;
        b.head_kernel = 3;
        b.gt_scale = Index{1} << i;
        b.cgm = i >= D - 2 ? CgmVariant::Full : CgmVariant::Simplified;
        b.channels = ch[static_cast<std::size_t>(i)];
        out.push_back(b);
    }
    return out;
}

std::vector<ParamSpec> branch_param_specs(const BranchSpec& b, bool with_cgm)
{
    std::vector<ParamSpec> specs;
    append_conv_specs(specs, b.head_prefix(), b.channels, 1, b.head_kernel);
    if (!with_cgm) return specs;
    const Index features = 2 * b.channels;
    const std::string p = b.cgm_prefix();
    append_norm_specs(specs, p + ".bn0", features);
    if (b.cgm == CgmVariant::Full) {
        const Index hidden = cgm_hidden(b.channels);
        specs.push_back({p + ".fc0.weight", {features, hidden}, ParamKind::LinearWeight});
        specs.push_back({p + ".fc0.bias", {hidden}, ParamKind::Bias});
        append_norm_specs(specs, p + ".bn1", hidden);
        specs.push_back({p + ".fc1.weight", {hidden, 2}, ParamKind::LinearWeight});
        specs.push_back({p + ".fc1.bias", {2}, ParamKind::Bias});
    } else {
        specs.push_back({p + ".fc0.weight", {features, 2}, ParamKind::LinearWeight});
        specs.push_back({p + ".fc0.bias", {2}, ParamKind::Bias});
    }
    return specs;
}

UNetSharp::UNetSharp(ArchConfig config, ModelOptions options, int level)
    : options_(options)
{
    ArchGraph full = build_grid(config);
    const int top = full.level();
    if (level < 0) level = top;
    if (top < 1) throw ArgumentError("model: depth must be at least 2 to carry supervised branches");
    graph_ = level == top ? full : restrict_grid(full, level);
    for (const BranchSpec& b : branch_specs(full)) {
        if (!graph_.contains(b.source)) continue;
        if (level < top && b.family != BranchFamily::In) continue;
        const bool is_final = b.source == NodeId{0, level};
        if (!options_.deep_supervision && !is_final) continue;
        branches_.push_back(b);
    }
}

UNetSharp::UNetSharp(ArchGraph graph, ModelOptions options, std::vector<BranchSpec> branches)
    : graph_(std::move(graph))
    , options_(options)
    , branches_(std::move(branches))
{
}

const BranchSpec& UNetSharp::final_branch() const
{
    for (const auto& b : branches_) {
        if (b.source == NodeId{0, level()}) return b;
    }
    throw ContractError("model: no head on " + to_string(NodeId{0, level()}));
}

bool UNetSharp::has_branch(NodeId source) const
{
    for (const auto& b : branches_) {
        if (b.source == source) return true;
    }
    return false;
}

std::vector<ParamSpec> UNetSharp::param_specs() const
{
    std::vector<ParamSpec> specs = grid_param_specs(graph_);
    for (const auto& b : branches_) {
        auto more = branch_param_specs(b, options_.cgm);
        specs.insert(specs.end(), more.begin(), more.end());
    }
    return specs;
}

Index UNetSharp::param_count() const
{
    Index total = 0;
    for (const auto& s : param_specs()) {
        if (is_learnable(s.kind)) total += numel(s.shape);
    }
    return total;
}

UNetSharp UNetSharp::pruned(int level) const
{
    if (level == this->level()) return *this;
    if (level < 1 || level > this->level()) {
        throw ArgumentError("prune: level " + std::to_string(level) + " outside 1.." + std::to_string(this->level()));
    }
    std::vector<BranchSpec> kept;
    for (const auto& b : branches_) {
        if (b.family == BranchFamily::In && b.source.column <= level) kept.push_back(b);
    }
    const bool has_output = std::any_of(kept.begin(), kept.end(), [&](const BranchSpec& b) {
        return b.source == NodeId{0, level};
    });
    if (!has_output) {
        throw ArgumentError("prune: model has no trained head on " + to_string(NodeId{0, level})
                            + " (train with deep supervision to prune)");
    }
    return UNetSharp(restrict_grid(graph_, level), options_, std::move(kept));
}

Index param_count(const ArchConfig& config, int level, CountOptions options)
{
    const ArchGraph full = build_grid(config);
    const ArchGraph graph = level >= full.level() ? full : restrict_grid(full, level);
    Index total = 0;
    for (const auto& s : grid_param_specs(graph)) {
        if (is_learnable(s.kind)) total += numel(s.shape);
    }
    if (options.heads && full.level() >= 1) {
        for (const BranchSpec& b : branch_specs(full)) {
            if (!graph.contains(b.source)) continue;
            if (graph.level() < full.level() && b.family != BranchFamily::In) continue;
            for (const auto& s : branch_param_specs(b, options.cgm)) {
                if (is_learnable(s.kind)) total += numel(s.shape);
            }
        }
    }
    return total;
}

OutputMode parse_output_mode(const std::string& name)
{
    if (name == "accurate") return OutputMode::Accurate;
    if (name == "fast") return OutputMode::Fast;
    throw ArgumentError("unknown output mode '" + name + "' (expected accurate or fast)");
}

NodeId parse_branch_name(const std::string& name)
{
    static const std::regex pattern(R"((in|de|en)_(\d)_(\d))");
    std::smatch m;
    if (!std::regex_match(name, m, pattern)) throw ArgumentError("unknown branch '" + name + "'");
    return {std::stoi(m[2]), std::stoi(m[3])};
}

} // namespace unetsharp
