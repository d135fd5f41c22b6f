"""Figures for reports: a target x class verdict heatmap and, optionally,
a transcript timeline underneath it."""

from __future__ import annotations

from typing import Iterable, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

from .core import MATRIX_CELL, NOT_PROBED, Finding, VerdictLevel, VulnClass  # noqa: E402

# index into the colour map; 0 is "not probed"
_LEVEL_INDEX = {None: 0, VerdictLevel.Secure: 1, VerdictLevel.Inconclusive: 2,
                VerdictLevel.Weak: 3, VerdictLevel.Vulnerable: 4}
_COLOURS = ["#f4f4f4", "#4c9a58", "#b8b8b8", "#e8a33c", "#c8413b"]
_LABELS = ["not probed", "Secure", "Inconclusive", "Weak", "Vulnerable"]

_DIRECTION_MARKER = {"ClientToProbe": ">", "ProbeToClient": "<", "ProbeToServer": "^",
                     "ServerToProbe": "v", "LocalObservation": "o"}


def _short(vc: VulnClass) -> str:
    # long CamelCase names are split onto two lines for the x axis
    name = vc.value
    for i in range(len(name) // 2, len(name)):
        if name[i].isupper():
            return name[:i] + "\n" + name[i:]
    return name


def matrix_grid(findings: Iterable[Finding]):
    findings = list(findings)
    targets = sorted({f.target for f in findings})
    grid = [[_LEVEL_INDEX[None]] * len(VulnClass) for _ in targets]
    cols = {vc: i for i, vc in enumerate(VulnClass)}
    rows = {t: i for i, t in enumerate(targets)}
    for f in findings:
        grid[rows[f.target]][cols[f.vuln_class]] = _LEVEL_INDEX[f.verdict.level]
    return targets, grid


def draw_matrix(ax, findings: Iterable[Finding]) -> None:
    targets, grid = matrix_grid(findings)
    cmap = ListedColormap(_COLOURS)
    if not targets:
        ax.text(0.5, 0.5, "no findings", ha="center", va="center", transform=ax.transAxes)
        ax.set_axis_off()
        return
    ax.imshow(grid, cmap=cmap, vmin=0, vmax=len(_COLOURS) - 1, aspect="auto")
    glyph = {v: k for k, v in _LEVEL_INDEX.items()}
    for r, row in enumerate(grid):
        for c, idx in enumerate(row):
            level = glyph[idx]
            text = NOT_PROBED if level is None else MATRIX_CELL.get(level, "?")
            ax.text(c, r, text, ha="center", va="center", fontsize=11,
                    color="white" if idx in (1, 4) else "black")
    ax.set_xticks(range(len(VulnClass)))
    ax.set_xticklabels([_short(vc) for vc in VulnClass], rotation=45, ha="right", fontsize=7)
    ax.set_yticks(range(len(targets)))
    ax.set_yticklabels(targets, fontsize=8)
    ax.set_xticks([x - 0.5 for x in range(1, len(VulnClass))], minor=True)
    ax.set_yticks([y - 0.5 for y in range(1, len(targets))], minor=True)
    ax.grid(which="minor", color="white", linewidth=1.5)
    ax.tick_params(which="minor", length=0)
    ax.legend(handles=[Patch(color=c, label=l) for c, l in zip(_COLOURS, _LABELS)],
              loc="upper left", bbox_to_anchor=(1.01, 1), fontsize=7, frameon=False)
    ax.set_title("Verdicts by target and class", fontsize=10)


def draw_timeline(ax, transcripts: Iterable[dict]) -> None:
    """``transcripts`` are Transcript.to_json() documents."""
    events = []
    for doc in transcripts:
        for e in doc.get("events", []):
            events.append((e["timestamp"], e["layer"], e["direction"], e.get("plaintext", True), doc["session"]))
    if not events:
        ax.text(0.5, 0.5, "empty transcript", ha="center", va="center", transform=ax.transAxes)
        ax.set_axis_off()
        return
    t0 = min(e[0] for e in events)
    layers = sorted({e[1] for e in events})
    y = {layer: i for i, layer in enumerate(layers)}
    sessions = sorted({e[4] for e in events})
    colour = {s: plt.cm.tab10(i % 10) for i, s in enumerate(sessions)}
    for ts, layer, direction, plain, session in events:
        ax.scatter((ts - t0) / 1e6, y[layer], marker=_DIRECTION_MARKER.get(direction, "o"), s=36,
                   facecolors=colour[session] if plain else "none", edgecolors=colour[session], linewidths=1)
    ax.set_yticks(range(len(layers)))
    ax.set_yticklabels(layers, fontsize=8)
    ax.set_xlabel("ms since first event", fontsize=8)
    ax.set_title("Transcript (filled = plaintext, hollow = encrypted)", fontsize=10)
    ax.grid(axis="x", alpha=0.3)
    if len(sessions) > 1:
        ax.legend(handles=[Patch(color=colour[s], label=s) for s in sessions], fontsize=7,
                  loc="upper left", bbox_to_anchor=(1.01, 1), frameon=False)


def render_figure(findings: Iterable[Finding], path: str, transcripts: Optional[list] = None,
                  dpi: int = 120) -> str:
    findings = list(findings)
    n_targets = max(len({f.target for f in findings}), 1)
    matrix_h = 1.6 + 0.35 * n_targets
    if transcripts:
        fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(10, matrix_h + 3.2),
                                       gridspec_kw={"height_ratios": [matrix_h, 3.2]})
        draw_matrix(ax1, findings)
        draw_timeline(ax2, transcripts)
    else:
        fig, ax1 = plt.subplots(figsize=(10, matrix_h))
        draw_matrix(ax1, findings)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path
