#pragma once

#include "unetsharp/param_store.hpp"

#include <map>
#include <string>
#include <vector>

namespace unetsharp {

enum class NodeRole { Encoder, Intermediate, Decoder };

/// Cell (level, column) of the triangular node matrix. Level 0 is full
/// resolution; column 0 is the encoder.
struct NodeId {
    int level = 0;
    int column = 0;

    friend auto operator<=>(const NodeId&, const NodeId&) = default;
};

std::string to_string(NodeId id);

struct ArchConfig {
    int depth = 5;
    std::vector<Index> channels{32, 64, 128, 256, 512};
    int convs_per_node = 2;
    UpsampleMode upsample_mode = UpsampleMode::Bilinear;
    Index input_channels = 1;
    Index input_size = 64;
    /// Doubles the conv stages of nodes at level 2 and deeper (VGG-like
    /// stage counts).
    bool deep_double_convs = false;

    /// Throws ArgumentError describing the first violated constraint.
    void validate() const;
    int last_column() const { return depth - 1; }
};

enum class EdgeKind {
    Input,      ///< the image, into (0,0)
    Downsample, ///< 2x2 max pool of the encoder one level up
    Dense,      ///< same-level node, concatenated as is
    Up,         ///< 2x upsample of (I+1, J-1)
    FullScale,  ///< conv-bn-relu after 2^(J-j) upsampling of an anti-diagonal node
};

const char* to_string(EdgeKind kind);

struct Edge {
    NodeId source;
    EdgeKind kind = EdgeKind::Dense;
    Index factor = 1;   ///< resampling factor
    Index channels = 0; ///< channels this edge contributes to the concatenation
};

struct GridNode {
    NodeId id;
    NodeRole role = NodeRole::Encoder;
    std::vector<Edge> inputs;
    Index in_channels = 0;
    Index out_channels = 0;
    int conv_stages = 2;

    std::string prefix() const;
};

/// Immutable node grid. Nodes are stored in evaluation order (column
/// ascending, then level), so every edge points at an earlier node.
class ArchGraph {
public:
    ArchGraph() = default;
    ArchGraph(ArchConfig config, std::vector<GridNode> nodes, int level);

    const ArchConfig& config() const { return config_; }
    const std::vector<GridNode>& nodes() const { return nodes_; }
    /// Largest retained anti-diagonal I+J.
    int level() const { return level_; }
    bool contains(NodeId id) const { return index_.count(id) != 0; }
    const GridNode& node(NodeId id) const;
    Index scale(NodeId id) const { return Index{1} << id.level; }

private:
    ArchConfig config_;
    std::vector<GridNode> nodes_;
    std::map<NodeId, std::size_t> index_;
    int level_ = 0;
};

NodeRole role_of(NodeId id, int depth);

ArchGraph build_grid(const ArchConfig& config);

/// Sub-grid of nodes with I+J <= level. Edges never cross from a dropped
/// node into a kept one, so the kept nodes compute exactly what they do in
/// the full grid.
ArchGraph restrict_grid(const ArchGraph& graph, int level);

/// Parameters of the grid body (no heads), in evaluation order.
std::vector<ParamSpec> grid_param_specs(const ArchGraph& graph);

enum class GraphFormat { Dot, Json };
GraphFormat parse_graph_format(const std::string& name);
std::string export_graph(const ArchGraph& graph, GraphFormat format);

/// Runs every node of the graph on `image` and returns all node outputs.
template <typename T>
std::map<NodeId, Var<T>> forward(const ArchGraph& graph, Context<T>& ctx, const Var<T>& image)
{
    const ArchConfig& cfg = graph.config();
    if (image.value().rank() != 4 || image.dim(1) != cfg.input_channels || image.dim(2) != cfg.input_size
        || image.dim(3) != cfg.input_size) {
        throw ShapeError("forward: image shape " + to_string(image.shape()) + " does not match config ("
                         + std::to_string(cfg.input_channels) + " channels, " + std::to_string(cfg.input_size)
                         + "px)");
    }
    std::map<NodeId, Var<T>> out;
    for (const GridNode& node : graph.nodes()) {
        std::vector<Var<T>> parts;
        for (const Edge& e : node.inputs) {
            Var<T> v;
            switch (e.kind) {
            case EdgeKind::Input:
                v = image;
                break;
            case EdgeKind::Downsample:
                v = max_pool2d(out.at(e.source));
                break;
            case EdgeKind::Dense:
                v = out.at(e.source);
                break;
            case EdgeKind::Up:
                v = upsample(out.at(e.source), e.factor, cfg.upsample_mode);
                break;
            case EdgeKind::FullScale: {
                const std::string name = node.prefix() + ".fs_" + std::to_string(e.source.level) + "_"
                    + std::to_string(e.source.column);
                v = conv_bn_relu(ctx, upsample(out.at(e.source), e.factor, cfg.upsample_mode), name + ".conv",
                    name + ".bn", 1);
                break;
            }
            }
            const Index expect = cfg.input_size >> node.id.level;
            if (v.dim(1) != e.channels || v.dim(2) != expect || v.dim(3) != expect) {
                throw ShapeError("forward: edge " + to_string(e.source) + " -> " + to_string(node.id) + " ("
                                 + to_string(e.kind) + ") delivers " + unetsharp::to_string(v.shape()));
            }
            parts.push_back(v);
        }
        Var<T> x = concat_channels(parts);
        for (int s = 0; s < node.conv_stages; ++s) {
            x = conv_bn_relu(ctx, x, node.prefix() + ".conv" + std::to_string(s),
                node.prefix() + ".bn" + std::to_string(s), 3);
        }
        out.emplace(node.id, x);
    }
    return out;
}

} // namespace unetsharp
