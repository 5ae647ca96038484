#include "unetsharp/arch_grid.hpp"

#include "json.hpp"

#include <sstream>

namespace unetsharp {

std::string to_string(NodeId id)
{
    return "(" + std::to_string(id.level) + "," + std::to_string(id.column) + ")";
}

const char* to_string(EdgeKind kind)
{
    switch (kind) {
    case EdgeKind::Input: return "input";
    case EdgeKind::Downsample: return "downsample";
    case EdgeKind::Dense: return "dense";
    case EdgeKind::Up: return "up";
    case EdgeKind::FullScale: return "full-scale";
    }
    return "?";
}

static const char* role_name(NodeRole role)
{
    switch (role) {
    case NodeRole::Encoder: return "En";
    case NodeRole::Intermediate: return "In";
    case NodeRole::Decoder: return "De";
    }
    return "?";
}

void ArchConfig::validate() const
{
    if (depth < 1 || depth > 5) throw ArgumentError("arch: depth must be in 1..5");
    if (static_cast<int>(channels.size()) != depth) {
        throw ArgumentError("arch: " + std::to_string(channels.size()) + " channel entries for depth "
                            + std::to_string(depth));
    }
    for (Index c : channels) {
        if (c < 1) throw ArgumentError("arch: channel counts must be positive");
    }
    if (convs_per_node < 1) throw ArgumentError("arch: convs_per_node must be >= 1");
    if (input_channels < 1) throw ArgumentError("arch: input_channels must be >= 1");
    const Index divisor = Index{1} << (depth - 1);
    if (input_size < divisor || input_size % divisor != 0) {
        throw ArgumentError("arch: input_size " + std::to_string(input_size) + " must be a positive multiple of "
                            + std::to_string(divisor));
    }
}

std::string GridNode::prefix() const
{
    return "node_" + std::to_string(id.level) + "_" + std::to_string(id.column);
}

NodeRole role_of(NodeId id, int depth)
{
    if (id.column == 0) return NodeRole::Encoder;
    if (id.level + id.column == depth - 1) return NodeRole::Decoder;
    return NodeRole::Intermediate;
}

ArchGraph::ArchGraph(ArchConfig config, std::vector<GridNode> nodes, int level)
    : config_(std::move(config))
    , nodes_(std::move(nodes))
    , level_(level)
{
    for (std::size_t i = 0; i < nodes_.size(); ++i) index_.emplace(nodes_[i].id, i);
}

const GridNode& ArchGraph::node(NodeId id) const
{
    auto it = index_.find(id);
    if (it == index_.end()) throw ArgumentError("graph: no node " + to_string(id));
    return nodes_[it->second];
}

ArchGraph build_grid(const ArchConfig& config)
{
    config.validate();
    const int D = config.depth;
    const auto& ch = config.channels;
    std::vector<GridNode> nodes;
    for (int J = 0; J < D; ++J) {
        for (int I = 0; I + J < D; ++I) {
            GridNode node;
            node.id = {I, J};
            node.role = role_of(node.id, D);
            node.out_channels = ch[I];
            node.conv_stages = config.convs_per_node * ((config.deep_double_convs && I >= 2) ? 2 : 1);
            if (J == 0) {
                if (I == 0) {
                    node.inputs.push_back({{0, 0}, EdgeKind::Input, 1, config.input_channels});
                } else {
                    node.inputs.push_back({{I - 1, 0}, EdgeKind::Downsample, 2, ch[I - 1]});
                }
            } else {
                for (int j = 0; j < J; ++j) node.inputs.push_back({{I, j}, EdgeKind::Dense, 1, ch[I]});
                node.inputs.push_back({{I + 1, J - 1}, EdgeKind::Up, 2, ch[I + 1]});
                for (int j = 0; j + 2 <= J; ++j) {
                    const NodeId src{I + J - j, j};
                    node.inputs.push_back({src, EdgeKind::FullScale, Index{1} << (J - j), ch[I]});
                }
            }
            for (const Edge& e : node.inputs) node.in_channels += e.channels;
            nodes.push_back(std::move(node));
        }
    }
    return ArchGraph(config, std::move(nodes), D - 1);
}

ArchGraph restrict_grid(const ArchGraph& graph, int level)
{
    if (level < 1 || level > graph.level()) {
        throw ArgumentError("prune: level " + std::to_string(level) + " outside 1.." + std::to_string(graph.level()));
    }
    std::vector<GridNode> kept;
    for (const GridNode& node : graph.nodes()) {
        if (node.id.level + node.id.column > level) continue;
        for (const Edge& e : node.inputs) {
            if (e.kind != EdgeKind::Input && e.source.level + e.source.column > level) {
                throw ContractError("prune: edge " + to_string(e.source) + " -> " + to_string(node.id)
                                    + " crosses the cut");
            }
        }
        kept.push_back(node);
    }
    return ArchGraph(graph.config(), std::move(kept), level);
}

std::vector<ParamSpec> grid_param_specs(const ArchGraph& graph)
{
    std::vector<ParamSpec> specs;
    for (const GridNode& node : graph.nodes()) {
        for (const Edge& e : node.inputs) {
            if (e.kind != EdgeKind::FullScale) continue;
            const std::string name = node.prefix() + ".fs_" + std::to_string(e.source.level) + "_"
                + std::to_string(e.source.column);
            const Index src_channels = graph.node(e.source).out_channels;
            append_conv_specs(specs, name + ".conv", src_channels, e.channels, 1);
            append_norm_specs(specs, name + ".bn", e.channels);
        }
        Index cin = node.in_channels;
        for (int s = 0; s < node.conv_stages; ++s) {
            append_conv_specs(specs, node.prefix() + ".conv" + std::to_string(s), cin, node.out_channels, 3);
            append_norm_specs(specs, node.prefix() + ".bn" + std::to_string(s), node.out_channels);
            cin = node.out_channels;
        }
    }
    return specs;
}

GraphFormat parse_graph_format(const std::string& name)
{
    if (name == "dot") return GraphFormat::Dot;
    if (name == "json") return GraphFormat::Json;
    throw ArgumentError("graph: unknown format '" + name + "' (expected dot or json)");
}

std::string export_graph(const ArchGraph& graph, GraphFormat format)
{
    const auto node_name = [](NodeId id) {
        return "n" + std::to_string(id.level) + "_" + std::to_string(id.column);
    };
    if (format == GraphFormat::Json) {
        nlohmann::ordered_json doc;
        doc["level"] = graph.level();
        doc["nodes"] = nlohmann::ordered_json::array();
        doc["edges"] = nlohmann::ordered_json::array();
        for (const GridNode& node : graph.nodes()) {
            doc["nodes"].push_back({{"I", node.id.level},
                {"J", node.id.column},
                {"role", role_name(node.role)},
                {"channels", node.out_channels},
                {"scale", graph.scale(node.id)},
                {"in_channels", node.in_channels}});
            for (const Edge& e : node.inputs) {
                nlohmann::ordered_json edge{{"to", {node.id.level, node.id.column}},
                    {"transform", to_string(e.kind)},
                    {"factor", e.factor},
                    {"channels", e.channels}};
                if (e.kind != EdgeKind::Input) edge["from"] = {e.source.level, e.source.column};
                doc["edges"].push_back(edge);
            }
        }
        return doc.dump(2) + "\n";
    }
    std::ostringstream os;
    os << "digraph unetsharp {\n  rankdir=LR;\n  input [shape=box];\n";
    for (const GridNode& node : graph.nodes()) {
        os << "  " << node_name(node.id) << " [label=\"" << role_name(node.role) << " " << to_string(node.id)
           << "\\nc=" << node.out_channels << " s=1/" << graph.scale(node.id) << "\"];\n";
    }
    for (const GridNode& node : graph.nodes()) {
        for (const Edge& e : node.inputs) {
            const std::string src = e.kind == EdgeKind::Input ? "input" : node_name(e.source);
            os << "  " << src << " -> " << node_name(node.id) << " [label=\"" << to_string(e.kind);
            if (e.factor > 1) os << " x" << e.factor;
            os << "\"];\n";
        }
    }
    os << "}\n";
    return os.str();
}

} // namespace unetsharp
