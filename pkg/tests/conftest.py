"""Shared fixtures and scaled-down synthetic specs for fast tests."""

import dataclasses

import torch

from celladapt.data import elongated_spec, round_spec

torch.set_num_threads(2)


def tiny_round_spec(**overrides):
    """Round-cell condition scaled for 32-48 px test patches."""
    base = dataclasses.replace(
        round_spec(),
        cells_per_patch=(1, 2),
        radius=(3.0, 5.0),
        border_margin=6.0,
        empty_fraction=0.0,
    )
    return dataclasses.replace(base, **overrides)


def tiny_elongated_spec(**overrides):
    base = dataclasses.replace(
        elongated_spec(),
        cells_per_patch=(1, 2),
        radius=(2.0, 3.0),
        border_margin=6.0,
        empty_fraction=0.0,
    )
    return dataclasses.replace(base, **overrides)
