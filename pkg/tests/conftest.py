import numpy as np
import pytest

from recon.diffusion import linear_schedule
from recon.experiments import World
from recon.toyworld import (Box, CategorySpec, Component, Layout, LayoutObject, Palette,
                            default_palette)


@pytest.fixture(scope="session")
def palette():
    return default_palette()


@pytest.fixture(scope="session")
def schedule():
    return linear_schedule()


@pytest.fixture(scope="session")
def world(palette, schedule):
    return World.default(palette=palette, schedule=schedule)


def simple_palette(sigma=0.05):
    """Gray background, one-component red, blue and green categories."""
    def cat(i, name, color):
        return CategorySpec(i, name, (Component(color, 1.0),))
    return Palette((cat(0, "bg", (0.5, 0.5, 0.5)), cat(1, "red", (1.0, 0.0, 0.0)),
                    cat(2, "blue", (0.0, 0.0, 1.0)), cat(3, "green", (0.0, 1.0, 0.0))), sigma)


def make_layout(boxes, width=16, height=16, caption=None):
    objs = tuple(LayoutObject(Box(*b), lab) for b, lab in boxes)
    cap = frozenset(caption if caption is not None else {lab for _, lab in boxes})
    return Layout(width, height, objs, cap)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
