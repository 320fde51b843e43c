"""Benchmark scenarios and the command line driver.

Three configurations are provided. The first is a manufactured case on
the unit square with known flow and transport solutions, used to audit
the estimator against the true goal error. The other two run a channel
with a narrowed midsection at moderate and at strong convection
dominance; there the goal is the space-time mean and no exact solution
is available.
"""

import argparse
import configparser
import csv
import os
import sys

import numpy as np

from .mesh2d import E, Mesh, RootGrid, write_vtk

# -- manufactured data, scenario 1 ----------------------------------------
# Rotating hump advected by a time-periodic vortex on the unit square.

NU_1 = 0.5
EPS_1 = 1.0
ALPHA_1 = 1.0
HUMP_A = 50.0
HUMP_S = -1.0 / 3.0


def exact_flow_ex1(x, y, t):
    """Velocity field of the first scenario: (npts, 2)."""
    st = np.sin(t)
    s1, s2 = np.sin(np.pi * x), np.sin(np.pi * y)
    c1, c2 = np.cos(np.pi * x), np.cos(np.pi * y)
    out = np.empty(np.shape(x) + (2,))
    out[..., 0] = st * s1 * s1 * s2 * c2
    out[..., 1] = -st * s1 * c1 * s2 * s2
    return out


def exact_pressure_ex1(x, y, t):
    s1, s2 = np.sin(np.pi * x), np.sin(np.pi * y)
    c1, c2 = np.cos(np.pi * x), np.cos(np.pi * y)
    return np.sin(t) * s1 * c1 * s2 * c2


def forcing_flow_ex1(x, y, t, nu=NU_1):
    """Body force reproducing the scenario-1 velocity and pressure."""
    st, ct = np.sin(t), np.cos(t)
    s1, s2 = np.sin(np.pi * x), np.sin(np.pi * y)
    c1, c2 = np.cos(np.pi * x), np.cos(np.pi * y)
    c21 = np.cos(2 * np.pi * x)
    c22 = np.cos(2 * np.pi * y)
    pp = np.pi * np.pi
    out = np.empty(np.shape(x) + (2,))
    out[..., 0] = (ct * s1 * s1 * s2 * c2
                   - nu * (2 * pp * st * c21 * s2 * c2
                           - 4 * pp * st * s1 * s1 * s2 * c2)
                   + np.pi * st * c21 * s2 * c2)
    out[..., 1] = (-ct * s1 * c1 * s2 * s2
                   - nu * (4 * pp * st * s1 * c1 * s2 * s2
                           - 2 * pp * st * s1 * c1 * c22)
                   + np.pi * st * s1 * c1 * c22)
    return out


def _hump_center(t):
    m1 = 0.5 + 0.25 * np.cos(2 * np.pi * t)
    m2 = 0.5 + 0.25 * np.sin(2 * np.pi * t)
    return m1, m2


def _hump_time_factor(t):
    """Value and derivative of the periodic on/off factor."""
    th = np.mod(t, 1.0)
    first = th < 0.5
    n1 = np.where(first, -1.0, 1.0)
    n2 = np.where(first,
                  5 * np.pi * (4 * th - 1.0),
                  5 * np.pi * (4 * (th - 0.5) - 1.0))
    val = n1 * HUMP_S * np.arctan(n2)
    dval = n1 * HUMP_S * 20 * np.pi / (1.0 + n2 * n2)
    return val, dval


def exact_transport_ex1(x, y, t):
    """Scalar hump rotating about the square's center."""
    m1, m2 = _hump_center(t)
    r2 = (x - m1) ** 2 + (y - m2) ** 2
    u1 = 1.0 / (1.0 + HUMP_A * r2)
    u2, _ = _hump_time_factor(t)
    return u1 * u2


def forcing_transport_ex1(x, y, t, eps=EPS_1, alpha=ALPHA_1):
    """Right-hand side reproducing the scenario-1 scalar."""
    a = HUMP_A
    m1, m2 = _hump_center(t)
    dm1 = -0.5 * np.pi * np.sin(2 * np.pi * t)
    dm2 = 0.5 * np.pi * np.cos(2 * np.pi * t)
    dx1 = x - m1
    dx2 = y - m2
    r2 = dx1 * dx1 + dx2 * dx2
    D = 1.0 + a * r2
    u1 = 1.0 / D
    g1 = -2 * a * dx1 / (D * D)
    g2 = -2 * a * dx2 / (D * D)
    lap1 = -4 * a / (D * D) + 8 * a * a * r2 / (D * D * D)
    du1 = 2 * a * (dx1 * dm1 + dx2 * dm2) / (D * D)
    u2, du2 = _hump_time_factor(t)
    v = exact_flow_ex1(x, y, t)
    conv = v[..., 0] * g1 + v[..., 1] * g2
    return (u2 * du1 + u1 * du2
            - eps * u2 * lap1
            + u2 * conv
            + alpha * u1 * u2)


def _fd_time(f, x, y, t, h=5e-4):
    return (f(x, y, t - 2 * h) - 8 * f(x, y, t - h)
            + 8 * f(x, y, t + h) - f(x, y, t + 2 * h)) / (12 * h)


def _fd_xy(f, x, y, t, h=5e-4):
    dx = (f(x - 2 * h, y, t) - 8 * f(x - h, y, t)
          + 8 * f(x + h, y, t) - f(x + 2 * h, y, t)) / (12 * h)
    dy = (f(x, y - 2 * h, t) - 8 * f(x, y - h, t)
          + 8 * f(x, y + h, t) - f(x, y + 2 * h, t)) / (12 * h)
    return dx, dy


def _fd_lap(f, x, y, t, h=5e-4):
    def d2(g):
        return (-g(-2 * h) + 16 * g(-h) - 30 * g(0.0)
                + 16 * g(h) - g(2 * h)) / (12 * h * h)

    return (d2(lambda s: f(x + s, y, t)) + d2(lambda s: f(x, y + s, t)))


def verify_manufactured(n=1000, seed=0, tol=1e-5):
    """Finite-difference audit of the manufactured forcing terms.

    Samples interior points away from the kinks of the scalar's time
    factor and compares both forcings against finite-difference stencils
    applied to the exact solutions. Raises on disagreement.
    """
    rng = np.random.default_rng(seed)
    x = 0.1 + 0.8 * rng.random(n)
    y = 0.1 + 0.8 * rng.random(n)
    t = 0.06 + 0.38 * rng.random(n) + 0.5 * (rng.random(n) < 0.5)

    vdot = _fd_time(exact_flow_ex1, x, y, t)
    lap_vx = _fd_lap(lambda a, b, c: exact_flow_ex1(a, b, c)[..., 0], x, y, t)
    lap_vy = _fd_lap(lambda a, b, c: exact_flow_ex1(a, b, c)[..., 1], x, y, t)
    px, py = _fd_xy(exact_pressure_ex1, x, y, t)
    f = forcing_flow_ex1(x, y, t)
    r1 = vdot[..., 0] - NU_1 * lap_vx + px - f[..., 0]
    r2 = vdot[..., 1] - NU_1 * lap_vy + py - f[..., 1]
    scale = max(1.0, float(np.max(np.abs(f))))
    worst_flow = max(np.max(np.abs(r1)), np.max(np.abs(r2))) / scale

    udot = _fd_time(exact_transport_ex1, x, y, t)
    ux, uy = _fd_xy(exact_transport_ex1, x, y, t)
    lap_u = _fd_lap(exact_transport_ex1, x, y, t)
    v = exact_flow_ex1(x, y, t)
    g = forcing_transport_ex1(x, y, t)
    r = (udot - EPS_1 * lap_u + v[..., 0] * ux + v[..., 1] * uy
         + ALPHA_1 * exact_transport_ex1(x, y, t) - g)
    scale = max(1.0, float(np.max(np.abs(g))))
    worst_tr = float(np.max(np.abs(r))) / scale

    if worst_flow > tol or worst_tr > tol:
        raise RuntimeError(
            f"manufactured data self-check failed: flow {worst_flow:.2e}, "
            f"transport {worst_tr:.2e}")
    return worst_flow, worst_tr


# -- channel geometry, scenarios 2 and 3 ----------------------------------


def build_ex2_geometry(edge=0.1):
    """Channel with a narrowed midsection, root cells of the given edge.

    Boxes: (-1,0)x(-0.5,0.5), (0,1)x(-0.1,0.1), (1,2)x(-0.5,0.5).
    The edge must divide 0.1 to keep every box on the lattice.
    """
    boxes = [(-1.0, -0.5, 0.0, 0.5),
             (0.0, -0.1, 1.0, 0.1),
             (1.0, -0.5, 2.0, 0.5)]
    grid = RootGrid.union_of_boxes(boxes, edge)
    return Mesh(grid)


# -- scenario wiring -------------------------------------------------------


class ScenarioSpec:
    """Bag of physics data, startup discretization, goal and tuning.

    Instances are consumed directly by the solvers and by the adaptive
    driver; every attribute is plain data or a callable on arrays.
    """

    def __init__(self, **kw):
        self.__dict__.update(kw)


def _half_share(x, y):
    # marking fraction proportional to the indicator's share, at most 1/2
    s = x + y
    return 0.5 * x / s if s > 0.0 else 0.0


def make_ex1():
    """Manufactured vortex-hump benchmark on the unit square."""
    unit = Mesh(RootGrid.box(0.0, 0.0, 1.0, 1.0))
    from . import slab_manager as sm
    from . import transport_solver as ts

    goal = ts.make_final_time_goal(exact_transport_ex1, 1.0)
    return ScenarioSpec(
        name="ex1",
        T=1.0,
        n_flow0=2, n_transport0=10,
        flow_mesh0=unit.refine_all(),
        transport_mesh0=unit.refine_all().refine_all(),
        nu=NU_1, eps=EPS_1, alpha=ALPHA_1, delta0=0.0,
        flow_forcing=forcing_flow_ex1,
        flow_fixed=None, flow_data=None, flow_initial=None,
        transport_forcing=forcing_transport_ex1,
        transport_fixed=None,
        transport_data=lambda xy, t: exact_transport_ex1(
            xy[:, 0], xy[:, 1], t),
        transport_initial=lambda xy: exact_transport_ex1(
            xy[:, 0], xy[:, 1], 0.0),
        goal=goal,
        exact_goal_error=lambda tl, g: ts.goal_error(tl, g, None),
        exact_flow_error=lambda fl: sm.l2l2_error_reconstructed(
            fl, exact_flow_ex1,
            lambda s: np.stack([s.store["vx"], s.store["vy"]], axis=1), 2),
        flow_gate_exact=True,
        default_loops=10,
        tuning={
            "varpi": 1.0, "omega": 2.0,
            "th_sigma_f": 1.0, "flow_time_window": None,
            "th_h1_f": 0.38, "th_h2_f": 0.38, "th_bot_f": 0.02,
            "th_tau_t": _half_share,
            "th_h1_t": lambda at, ah: _half_share(ah, at),
            "th_h2_t": lambda at, ah: _half_share(ah, at),
            "th_bot_t": 0.02,
        },
    )


def _channel_inflow(xy, t):
    # parabolic profile, smooth arctan ramp until the switch-on time
    ramp = np.arctan(t) / (0.5 * np.pi) if t <= 0.1 else 1.0
    vx = ramp * (1.0 - 4.0 * xy[:, 1] ** 2) * (np.abs(xy[:, 0] + 1.0) < 1e-12)
    return np.stack([vx, np.zeros(len(xy))], axis=1)


def _channel_fixed(x, y, side):
    # essential data everywhere except the outflow face at x = 2; corner
    # nodes stay fixed through their wall face
    return not (side == E and x > 2.0 - 1e-12)


def _channel_transport_data(xy, t):
    u = np.zeros(len(xy))
    if t <= 0.1:
        on = (np.abs(xy[:, 0] + 1.0) < 1e-12) & (np.abs(xy[:, 1]) < 0.4)
        u[on] = 1.0
    return u


def make_ex2(edge=0.1):
    """Channel with narrowed midsection, moderate convection dominance."""
    from . import transport_solver as ts

    root = build_ex2_geometry(edge)
    mesh0 = root.refine_all()
    T = 2.5
    return ScenarioSpec(
        name="ex2",
        T=T,
        n_flow0=25, n_transport0=25,
        flow_mesh0=mesh0, transport_mesh0=mesh0,
        nu=1.0, eps=1e-4, alpha=0.1, delta0=0.0,
        flow_forcing=None,
        flow_fixed=_channel_fixed,
        flow_data=_channel_inflow,
        flow_initial=None,
        transport_forcing=None,
        transport_fixed=_channel_fixed,
        transport_data=_channel_transport_data,
        transport_initial=None,
        goal=ts.make_mean_goal(T, root.area()),
        exact_goal_error=None,
        exact_flow_error=None,
        flow_gate_exact=False,
        default_loops=5,
        tuning={
            "varpi": 1.0, "omega": 3.0,
            "th_sigma_f": 1.0, "flow_time_window": 0.2,
            "th_h1_f": 1.0, "th_h2_f": 1.0, "th_bot_f": 0.0,
            "th_tau_t": lambda at, ah: min(_half_share(at, ah), 1.0),
            "th_h1_t": lambda at, ah: min(_half_share(ah, at), 1.0),
            "th_h2_t": lambda at, ah: min(_half_share(ah, at), 1.0),
            "th_bot_t": 0.02,
        },
    )


def make_ex3(edge=0.1):
    """The channel at strong convection dominance with stabilization."""
    spec = make_ex2(edge)
    spec.name = "ex3"
    spec.eps = 1e-6
    spec.delta0 = 0.1
    spec.tuning.update({
        "th_sigma_f": 0.2,
        "th_h1_f": 0.33, "th_h2_f": 0.33, "th_bot_f": 0.02,
        "omega": 3.0,
    })
    return spec


SCENARIOS = {"ex1": make_ex1, "ex2": make_ex2, "ex3": make_ex3}


# -- outputs ---------------------------------------------------------------

TRACE_COLUMNS = [
    ("loop", "loop"), ("n_flow_slabs", "n_flow"),
    ("max_flow_cells", "cells_flow"), ("flow_dofs", "dofs_flow"),
    ("flow_err_or_ind", "flow_err"), ("n_transport_slabs", "n_transport"),
    ("max_transport_cells", "cells_transport"),
    ("transport_dofs", "dofs_transport"), ("goal_err", "goal_err"),
    ("eta_h", "eta_h"), ("eta_tau", "eta_tau"), ("i_eff", "i_eff"),
]


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([c for c, _ in TRACE_COLUMNS])
        for row in trace:
            wr.writerow([row[k] for _, k in TRACE_COLUMNS])


def write_snapshots(out_dir, state, count):
    """Evenly spaced end-of-slab transport fields as legacy VTK files."""
    from . import fem_core as fc
    from .mesh2d import vtk_vertices

    tl = state["transport_list"]
    idx = np.unique(np.round(np.linspace(0, len(tl) - 1,
                                         min(count, len(tl)))).astype(int))
    paths = []
    for k, n in enumerate(idx):
        slab = tl[int(n)]
        pts, _ = vtk_vertices(slab.mesh)
        u = fc.evaluate_field(slab.mesh, 1, slab.store["u"], pts)
        path = os.path.join(out_dir, f"u_{k:03d}.vtk")
        write_vtk(path, slab.mesh, {"u": u},
                  title=f"transport at t={slab.t1:.6g}")
        paths.append(path)
    return paths


# -- command line ----------------------------------------------------------


def _parse_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text in ("true", "false"):
        return text == "true"
    return text


def _apply_overrides(scenario, pairs):
    for key, value in pairs:
        if key in scenario.tuning:
            scenario.tuning[key] = value
        elif hasattr(scenario, key):
            setattr(scenario, key, value)
        else:
            raise KeyError(key)


def build_parser():
    ap = argparse.ArgumentParser(
        prog="stadapt",
        description="Adaptive space-time solver for coupled flow and "
                    "transport.")
    ap.add_argument("--scenario", choices=sorted(SCENARIOS),
                    help="benchmark configuration to run")
    ap.add_argument("--config", help="INI file with a [scenario] section")
    ap.add_argument("--loops", type=int, default=None,
                    help="maximum adaptation loops")
    ap.add_argument("--tol", type=float, default=None,
                    help="stop once the goal error measure is below this")
    ap.add_argument("--out", help="output directory for trace and slabs")
    ap.add_argument("--set", dest="overrides", action="append", default=[],
                    metavar="KEY=VALUE",
                    help="override a scenario or tuning entry (repeatable)")
    ap.add_argument("--snapshots", type=int, default=0,
                    help="write this many VTK snapshots of the final run")
    ap.add_argument("--skip-selfcheck", action="store_true",
                    help="skip the manufactured-data consistency check")
    return ap


def main(argv=None):
    from . import adaptivity
    from .slab_manager import compute_characteristic_times, write_slabs_csv

    ap = build_parser()
    args = ap.parse_args(argv)

    name = args.scenario
    loops = args.loops
    tol = args.tol
    out = args.out
    pairs = []
    if args.config:
        ini = configparser.ConfigParser()
        if not ini.read(args.config):
            ap.error(f"cannot read config file {args.config}")
        sec = ini["scenario"] if "scenario" in ini else {}
        name = name or sec.get("name")
        loops = loops if loops is not None else (
            int(sec["loops"]) if "loops" in sec else None)
        tol = tol if tol is not None else (
            float(sec["tol"]) if "tol" in sec else None)
        out = out or sec.get("out")
        if "set" in ini:
            pairs.extend((k, _parse_value(v)) for k, v in ini["set"].items())
    for item in args.overrides:
        if "=" not in item:
            ap.error(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        pairs.append((key, _parse_value(value)))
    if name is None:
        ap.error("no scenario given (use --scenario or --config)")

    build_kw = {}
    if name in ("ex2", "ex3"):
        for key, value in list(pairs):
            if key == "edge":
                build_kw["edge"] = float(value)
                pairs.remove((key, value))
    scenario = SCENARIOS[name](**build_kw)
    try:
        _apply_overrides(scenario, pairs)
    except KeyError as exc:
        ap.error(f"unknown override key {exc.args[0]!r}")
    if loops is None:
        loops = scenario.default_loops

    tf, tt = compute_characteristic_times(scenario.eps, scenario.alpha)
    print(f"scenario {scenario.name}: characteristic flow time {tf:g}, "
          f"transport time {tt:g}, horizon {scenario.T:g}")
    if scenario.name == "ex1" and not args.skip_selfcheck:
        verify_manufactured(n=300, seed=0)
        print("manufactured data self-check passed")

    def report(loop, state):
        row = state["trace"][-1]
        print("loop {loop:3d}: flow {n_flow}x{cells_flow} cells "
              "(err {flow_err:.3e}), transport "
              "{n_transport}x{cells_transport}, goal err {goal_err:.3e}, "
              "eta_tau {eta_tau:.3e}, eta_h {eta_h:.3e}".format(**row),
              flush=True)

    state = adaptivity.run_dwr_loop(scenario, loops, tol=tol,
                                    callback=report)

    if out:
        os.makedirs(out, exist_ok=True)
        write_trace_csv(os.path.join(out, "trace.csv"), state["trace"])
        write_slabs_csv(os.path.join(out, "slabs.csv"),
                        state["flow_list"], state["transport_list"])
        if args.snapshots > 0:
            write_snapshots(out, state, args.snapshots)
        print(f"wrote {out}/trace.csv and {out}/slabs.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
