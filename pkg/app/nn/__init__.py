from app.nn.sparse import ActiveSet, SparseFeatureMap
from app.nn.tensor import Parameter, Tensor, backward

__all__ = ['ActiveSet', 'SparseFeatureMap', 'Parameter', 'Tensor', 'backward']
