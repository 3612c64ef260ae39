#!/usr/bin/env python3
"""Regenerates the default task scripts under crates/core/data/tasks/.

Every motion segment is a minimum-jerk profile, so velocity and acceleration
are zero at segment boundaries and the chained phases are C2-continuous.
Waypoints are sampled every 50 ms.
"""

import json
import math
import os

DT = 0.05
OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "data", "tasks")


def min_jerk(s):
    return 10 * s**3 - 15 * s**4 + 6 * s**5


def segment(duration, pos_fn, grip_fn=None):
    """Samples s in [0, 1] over `duration`; returns list of (dt_offset, pos, grip)."""
    n = int(round(duration / DT))
    out = []
    for i in range(n + 1):
        s = min_jerk(i / n)
        out.append((i * DT, pos_fn(s), grip_fn(s) if grip_fn else None))
    return out


def line(a, b):
    return lambda s: [a[k] + (b[k] - a[k]) * s for k in range(3)]


def hold(p):
    return lambda s: list(p)


def phase(name, segments, t0):
    """Concatenates segments into one phase starting at absolute time t0."""
    wps = []
    t = t0
    for seg in segments:
        for j, (dt, p, g) in enumerate(seg):
            if wps and j == 0:
                continue
            w = {"t": round(t + dt, 9), "x": round(p[0], 9), "y": round(p[1], 9), "z": round(p[2], 9)}
            if g is not None:
                w["grip"] = round(min(max(g, 0.0), 1.0), 9)
            wps.append(w)
        t += seg[-1][0]
    return {"name": name, "trajectory": {"frame": "world", "dt_hint": DT, "waypoints": wps}}, t


def gross():
    p0 = [0.45, -0.05, 0.30]
    p1 = [0.33, -0.05, 0.38]
    p2 = [0.63, 0.02, 0.34]
    pivot = [0.40, 0.0, 0.34]
    r = math.hypot(p2[0] - pivot[0], p2[1] - pivot[1])
    th0 = math.atan2(p2[1] - pivot[1], p2[0] - pivot[0])
    sweep = 0.9

    def arc(s):
        th = th0 + sweep * s
        return [pivot[0] + r * math.cos(th), pivot[1] + r * math.sin(th), p2[2]]

    p3 = arc(1.0)
    phases = []
    t = 0.0
    ph, t = phase("backward-contraction", [segment(5.0, line(p0, p1))], t)
    phases.append(ph)
    ph, t = phase("forward-extension", [segment(7.0, line(p1, p2))], t)
    phases.append(ph)
    ph, t = phase("arm-swivel-stretch", [segment(6.0, arc), segment(6.0, line(p3, p0))], t)
    phases.append(ph)
    return {
        "id": "GrossArm-ADL",
        "kind": "GrossArm",
        "target_muscles": [
            "anterior-deltoid",
            "posterior-deltoid",
            "biceps-brachii",
            "triceps-brachii",
            "upper-trapezius",
            "pectoralis-major",
        ],
        "phases": phases,
    }


def fine():
    p0 = [0.45, 0.0, 0.28]
    q = [0.52, 0.06, 0.20]
    q2 = [0.52, 0.06, 0.27]
    open_ = lambda s: 0.0
    phases = []
    t = 0.0
    ph, t = phase(
        "pick-up-with-guidance",
        [segment(4.0, line(p0, q), open_), segment(3.0, line(q, q2), open_)],
        t,
    )
    phases.append(ph)
    for i in range(1, 6):
        ph, t = phase(
            f"fist-hold-{i}",
            [segment(1.0, hold(q2), lambda s: s), segment(1.5, hold(q2), lambda s: 1.0)],
            t,
        )
        phases.append(ph)
        ph, t = phase(
            f"palm-open-{i}",
            [segment(1.0, hold(q2), lambda s: 1.0 - s), segment(1.0, hold(q2), open_)],
            t,
        )
        phases.append(ph)
    ph, t = phase("release-and-return", [segment(5.0, line(q2, p0), open_)], t)
    phases.append(ph)
    return {
        "id": "FineHand-Finger",
        "kind": "FineHand",
        "target_muscles": [
            "flexor-digitorum-superficialis",
            "extensor-digitorum",
            "flexor-carpi-radialis",
            "extensor-carpi-ulnaris",
            "brachioradialis",
        ],
        "phases": phases,
    }


def main():
    os.makedirs(OUT, exist_ok=True)
    for name, task in (("gross_arm.json", gross()), ("fine_hand.json", fine())):
        with open(os.path.join(OUT, name), "w") as f:
            json.dump(task, f, separators=(",", ":"))
            f.write("\n")


if __name__ == "__main__":
    main()
