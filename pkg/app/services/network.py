"""
BEV backbone: a sparse UNet described by a LayerGraph, plus the parameters of
the description, height and overlap heads.
"""
from dataclasses import dataclass

import numpy as np

from app.nn import layers as L
from app.nn.sparse import ActiveSet, SparseFeatureMap
from app.nn.tensor import Tensor
from app.utils.errors import CheckpointError, ConsistencyError, ShapeError

DESCRIPTOR_BIAS = 0.1


@dataclass(frozen=True)
class LayerNode:
    """One stage of the backbone. `inputs` name earlier nodes (or 'input')."""
    name: str
    kind: str
    inputs: tuple
    channels: int
    level: int


class LayerGraph:
    """
    Topologically ordered encoder/decoder stages.

    Encoder node E<l> sits at stride 2^(l-1); decoder node F<l> joins the
    coarser map with the skip E<l> of the same level.
    """

    def __init__(self, nodes):
        self.nodes = tuple(nodes)
        self.validate()

    @classmethod
    def unet(cls, channels):
        depth = len(channels)
        nodes = [LayerNode('E1', 'stem', ('input',), channels[0], 1)]
        for level in range(2, depth + 1):
            nodes.append(LayerNode(f'E{level}', 'down', (f'E{level - 1}',), channels[level - 1], level))
        coarse = f'E{depth}'
        for level in range(depth - 1, 0, -1):
            nodes.append(LayerNode(f'F{level}', 'up', (coarse, f'E{level}'), channels[level - 1], level))
            coarse = f'F{level}'
        return cls(nodes)

    @property
    def depth(self):
        return sum(1 for n in self.nodes if n.kind in ('stem', 'down'))

    def validate(self):
        seen = {'input'}
        for node in self.nodes:
            missing = [name for name in node.inputs if name not in seen]
            if missing:
                raise ConsistencyError(f"{node.name} reads {missing} before they are produced")
            if node.kind == 'up' and node.inputs[1] != f'E{node.level}':
                raise ConsistencyError(f"{node.name} must take its skip from E{node.level}")
            seen.add(node.name)

    def __iter__(self):
        return iter(self.nodes)


class Stage(L.Layer):
    def __init__(self, rng, node, in_channels):
        super().__init__()
        self.node = node
        if node.kind == 'stem':
            self.children['conv'] = L.SubmanifoldConv(rng, in_channels, node.channels)
        elif node.kind == 'down':
            self.children['conv'] = L.StridedConv(rng, in_channels, node.channels)
        else:
            self.children['conv'] = L.SubmanifoldConv(rng, in_channels, node.channels)
        self.children['res'] = L.ResidualBlock(rng, node.channels)

    def __call__(self, *inputs):
        x = L.upsample_concat(*inputs) if self.node.kind == 'up' else inputs[0]
        x = L.pointwise(self.children['conv'](x), 'relu')
        return self.children['res'](x)


class OverlapHead(L.Layer):
    """Cross-attention fusion, then conv3x3 -> ReLU -> conv3x3 -> sigmoid."""

    def __init__(self, rng, channels):
        super().__init__()
        hidden = max(channels // 2, 1)
        self.children['att'] = L.Attention(rng, channels)
        self.children['mlp'] = L.MLP3(rng, (2 * channels, channels, channels, channels))
        self.children['cls1'] = L.SubmanifoldConv(rng, channels, hidden)
        self.children['cls2'] = L.SubmanifoldConv(rng, hidden, 1)


class BevNet(L.Layer):
    """UNet backbone with description, height and overlap heads, seeded deterministically."""

    def __init__(self, run_config):
        super().__init__()
        model = run_config.model
        self.run_config = run_config
        self.graph = LayerGraph.unet(model.channels)
        self.bev = run_config.bev
        height, width, depth_channels = self.bev.resolution
        factor = 2 ** (self.graph.depth - 1)
        if height % factor or width % factor:
            raise ShapeError(f"grid {height}x{width} must be divisible by {factor} for a depth-{self.graph.depth} encoder")
        rng = np.random.default_rng(model.seed)
        widths = {'input': depth_channels}
        for node in self.graph:
            in_channels = sum(widths[name] for name in node.inputs)
            self.children[node.name] = Stage(rng, node, in_channels)
            widths[node.name] = node.channels
        finest = widths['F1'] if 'F1' in widths else widths['E1']
        self.children['describe'] = L.SubmanifoldConv(rng, finest, model.descriptor_dim, kernel=1)
        self._init_describe(self.children['describe'])
        self.children['height'] = L.SubmanifoldConv(rng, finest, depth_channels)
        self.overlap_source = self._overlap_source(model.overlap_level)
        self.children['overlap'] = OverlapHead(rng, widths[self.overlap_source])

    @staticmethod
    def _init_describe(conv):
        """Non-negative weights and a positive bias; with F1 >= 0 every fresh descriptor has a positive max."""
        weight, bias = conv.params['weight'], conv.params['bias']
        weight.data = np.abs(weight.data)
        bias.data = np.full_like(bias.data, DESCRIPTOR_BIAS)

    def _overlap_source(self, level):
        depth = self.graph.depth
        if not 1 <= level <= depth:
            raise ShapeError(f"overlap level {level} outside 1..{depth}")
        return f'E{depth}' if level == depth else f'F{level}'

    def encode(self, grid):
        """Run the backbone on one grid; returns every stage's map keyed by node name."""
        active = ActiveSet.from_mask(grid.pillar_mask)
        maps = {'input': SparseFeatureMap(active, Tensor(grid.pillar_features(active.coords)))}
        for node in self.graph:
            maps[node.name] = self.children[node.name](*(maps[name] for name in node.inputs))
        return maps

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, blobs):
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(blobs))
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters {missing[:3]}")
        for name, param in params.items():
            value = np.asarray(blobs[name], dtype=np.float64)
            if value.shape != param.shape:
                raise CheckpointError(f"parameter {name} has shape {value.shape}, expected {param.shape}")
            param.data = value.copy()
