from dataclasses import dataclass

import numpy as np

COMPONENTS = ("loader_clf", "loader_gen", "sampler", "init", "attack", "buffer", "augment", "eval")


@dataclass(frozen=True)
class ComponentSeeds:
    """由主种子派生的各组件种子"""
    master: int
    loader_clf: int
    loader_gen: int
    sampler: int
    init: int
    attack: int
    buffer: int
    augment: int
    eval: int

    def rng(self, component: str) -> np.random.Generator:
        """组件专属随机数生成器"""
        return np.random.default_rng(getattr(self, component))


def derive_seeds(master: int) -> ComponentSeeds:
    """主种子 -> 各组件种子（确定性展开）"""
    children = np.random.SeedSequence(master).spawn(len(COMPONENTS))
    values = {name: int(child.generate_state(1, dtype=np.uint32)[0]) for name, child in zip(COMPONENTS, children)}
    return ComponentSeeds(master=master, **values)
