import random

import pytest

from visprob.modules import ModuleSet, build_toy_modules, init_params
from visprob.scene import Scene, SceneObject
from visprob.values import Categorical, Detection
from visprob.world import WorldConfig

# attribute-compare program over one image (two LOC, two CROP, two VQA, EVAL)
TWO_BRANCH_PROGRAM = """BOX0=LOC(image=IMAGE,object='post')
IMAGE0=CROP(image=IMAGE,box=BOX0)
BOX1=LOC(image=IMAGE,object='sign')
IMAGE1=CROP(image=IMAGE,box=BOX1)
ANSWER0=VQA(image=IMAGE0,question='What color is the post?')
ANSWER1=VQA(image=IMAGE1,question='What color is the sign?')
ANSWER2=EVAL(expr="'yes' if {ANSWER0} != {ANSWER1} else 'no'")
FINAL_RESULT=RESULT(var=ANSWER2)"""

# one crop feeding several answers that meet in an EVAL (shared ancestry)
SHARED_LATENT_PROGRAM = """BOX0=LOC(image=IMAGE,object='person')
IMAGE0=CROP(image=IMAGE,box=BOX0)
ANSWER0=VQA(image=IMAGE0,question='Is the person sitting?')
ANSWER1=VQA(image=IMAGE0,question='What color is the person?')
ANSWER2=VQA(image=IMAGE,question='What color is the dog?')
ANSWER3=EVAL(expr="{ANSWER1} if {ANSWER0} == 'yes' else {ANSWER2}")
FINAL_RESULT=RESULT(var=ANSWER3)"""


@pytest.fixture(scope="session")
def world_config() -> WorldConfig:
    return WorldConfig()


@pytest.fixture(scope="session")
def small_world_config() -> WorldConfig:
    # small outcome spaces keep brute-force enumeration cheap
    return WorldConfig(pool_size=2)


@pytest.fixture(scope="session")
def toy_modules(world_config) -> ModuleSet:
    return build_toy_modules(world_config.vocab, world_config.pool_size)


@pytest.fixture()
def rng() -> random.Random:
    return random.Random(12345)


@pytest.fixture(scope="session")
def two_object_scene(world_config) -> Scene:
    v = world_config.vocab
    return Scene(3, 3, (
        SceneObject((0, 0), "post", "red", "wood", "standing"),
        SceneObject((2, 2), "sign", "blue", "metal", "standing"),
    ))


class FixedLoc:
    """LOC stub emitting a fixed outcome distribution regardless of inputs."""

    def __init__(self, outcomes, probs):
        self.outcomes = outcomes
        self.probs = probs

    def outcome_distribution(self, scene, region, object_name, params, tape=None):
        support = [Detection(region.image, cells) for cells in self.outcomes]
        if tape is None:
            return Categorical(support, list(self.probs))
        return Categorical(support, [tape.constant(p) for p in self.probs])


class RegionKeyedVqa:
    """VQA stub answering from a (region rectangle -> distribution) table."""

    def __init__(self, table, default=None):
        self.table = table
        self.default = default

    def answer_distribution(self, scene, region, question, params, tape=None):
        key = (region.r0, region.c0, region.r1, region.c1)
        entry = self.table.get(key, self.default)
        assert entry is not None, f"no stub answer for region {key}"
        support, probs = entry
        if tape is None:
            return Categorical(list(support), list(probs))
        return Categorical(list(support), [tape.constant(p) for p in probs])


def stub_modules(loc, vqa) -> ModuleSet:
    return ModuleSet(loc=loc, vqa=vqa)
