"""Regenerate the shipped preset JSON files.

    python scripts/make_presets.py
"""

from pathlib import Path

from opre.game import GridConfig, ResourceKind
from opre.presets import dump_preset

OUT = Path(__file__).resolve().parents[1] / "src" / "opre" / "presets"

R, P, S = ResourceKind.ROCK, ResourceKind.PAPER, ResourceKind.SCISSORS


def rws() -> GridConfig:
    # 6x6 lattice of resource cells; three 2x3 lattice blocks have a fixed kind.
    lattice_rows = [1, 3, 5, 7, 9, 11]
    lattice_cols = [2, 5, 8, 12, 15, 18]
    fixed_blocks = {(0, 0): R, (1, 1): P, (2, 0): S}
    deterministic, random_cells = [], []
    for i, r in enumerate(lattice_rows):
        for j, c in enumerate(lattice_cols):
            kind = fixed_blocks.get((i // 2, j // 3))
            if kind is None:
                random_cells.append((r, c))
            else:
                deterministic.append(((r, c), int(kind)))
    return GridConfig(
        name="rws",
        rows=13,
        cols=21,
        num_players=2,
        deterministic_resource_cells=tuple(deterministic),
        random_resource_cells=tuple(random_cells),
        episode_limit=500,
        terminate_on_tag=True,
    )


def rps_arena() -> GridConfig:
    return GridConfig(
        name="rps_arena",
        rows=13,
        cols=42,
        num_players=5,
        random_resource_count=72,
        episode_limit=1000,
        respawn_delay=100,
        freeze_duration=50,
        reset_inventory_on_tag=True,
        terminate_on_tag=False,
    )


def rws_7x7() -> GridConfig:
    # R block top-left, P block top-right, S block bottom; lanes in between.
    cells = []
    for r in range(4):
        for c in range(3):
            cells.append(((r, c), int(R)))
            cells.append(((r, c + 4), int(P)))
    for r in (5, 6):
        for c in range(6):
            cells.append(((r, c), int(S)))
    return GridConfig(
        name="rws_7x7",
        rows=7,
        cols=7,
        num_players=2,
        deterministic_resource_cells=tuple(sorted(cells)),
        episode_limit=100,
        terminate_on_tag=True,
    )


if __name__ == "__main__":
    for make in (rws, rps_arena, rws_7x7):
        cfg = make()
        (OUT / f"{cfg.name}.json").write_text(dump_preset(cfg))
        print(cfg.name, cfg.config_hash()[:12], cfg.num_resource_cells, "resource cells")
