from .graph import Graph, Node, evaluate, gradient
from .tensor import ParameterSet, Tensor
