"""Line-oriented text reports.

A report is a title line followed by ``[section]`` blocks of ``key = value``
lines and ``[table name]`` blocks of whitespace-aligned columns.  Every
report starts with a ``[manifest]`` section: version tag, command, seed,
input fingerprints and output paths, then the full ``[config]``.  Nothing
time- or host-dependent is written, so identical manifests give identical
reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import __version__

VERSION_TAG = f"caamargin-{__version__}"


def fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _cell(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    return fmt(value)


@dataclass
class Manifest:
    command: str
    seed: int
    config_lines: list
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)


class Report:
    def __init__(self, title, manifest: Manifest):
        self.lines = [f"# {title}"]
        items = [("version", VERSION_TAG), ("command", manifest.command), ("seed", manifest.seed)]
        items += [(f"input.{k}", v) for k, v in sorted(manifest.inputs.items())]
        items += [(f"output.{k}", v) for k, v in sorted(manifest.outputs.items())]
        self.section("manifest", items)
        self.lines.append("[config]")
        self.lines.extend(manifest.config_lines)
        self.lines.append("")

    def section(self, name, items):
        self.lines.append(f"[{name}]")
        self.lines.extend(f"{k} = {fmt(v)}" for k, v in items)
        self.lines.append("")

    def table(self, name, headers, rows):
        cells = [list(headers)] + [[_cell(v) for v in row] for row in rows]
        widths = [max(len(r[c]) for r in cells) for c in range(len(headers))]
        self.lines.append(f"[table {name}]")
        for r in cells:
            self.lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip())
        self.lines.append("")

    def text(self):
        return "\n".join(self.lines) + "\n"


def parse_sections(text):
    """Read back ``key = value`` sections as ``{section: {key: value}}`` (tables skipped)."""
    out, current = {}, None
    for line in text.splitlines():
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1]
            current = None if name.startswith("table ") else out.setdefault(name, {})
        elif current is not None and " = " in line:
            k, v = line.split(" = ", 1)
            current[k] = v
    return out
