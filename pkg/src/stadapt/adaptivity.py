"""Marking, mesh adaptation and the outer solve-estimate-adapt loop.

One loop iteration solves the flow forward, the transport forward and
the transport dual backward, evaluates the indicators, records a trace
row and then adapts: the flow lists only when the flow error gate fires,
the transport lists in time, space or both depending on which indicator
dominates. Spatial changes are executed before temporal ones and the
transport breakpoints are repaired afterwards so the flow breakpoints
stay embedded exactly.
"""

import numpy as np

from . import error_estimation as ee
from . import fem_core as fc
from . import stokes_solver as ss
from . import transport_solver as ts
from .mesh2d import SIDES, Mesh
from .slab_manager import audit_alignment


def mark_top_fraction(values, theta):
    """Indices of the ceil(theta n) entries with largest magnitude.

    Ties resolve to the lower index; theta is rounded to nine decimals
    first so thresholds like 1/3 on three entries mark exactly one.
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    if n == 0 or theta <= 0.0:
        return np.array([], dtype=np.int64)
    k = min(n, int(np.ceil(round(theta * n, 9))))
    order = np.argsort(-np.abs(values), kind="stable")
    return np.sort(order[:k])


def mark_bottom_fraction(values, theta):
    """Indices of the ceil(theta n) entries with smallest magnitude."""
    values = np.asarray(values, dtype=float)
    n = values.size
    if n == 0 or theta <= 0.0:
        return np.array([], dtype=np.int64)
    k = min(n, int(np.ceil(round(theta * n, 9))))
    order = np.argsort(np.abs(values), kind="stable")
    return np.sort(order[:k])


def decide_flow_refinement(eta_sigma_f, eta_h_f, eta_tau_t, eta_h_t,
                           varpi):
    """Flow adaptation gate: flow surrogates dominate the transport
    estimate, with the safety factor varpi on the temporal part."""
    return abs(eta_sigma_f) + abs(eta_h_f) > \
        varpi * abs(eta_tau_t) + abs(eta_h_t)


def decide_transport_mode(eta_tau, eta_h, omega):
    """'time', 'space' or 'both' by which indicator dominates."""
    at, ah = abs(eta_tau), abs(eta_h)
    if at > omega * ah:
        return "time"
    if ah > omega * at:
        return "space"
    return "both"


def coarsen_patch_groups(mesh, marked):
    """Coarsen 16-cell groups that are fully marked, one level at a time.

    A group is the set of grandchildren of a common ancestor; removing
    the four intermediate nodes leaves the ancestor's children as a
    sibling quartet, so the patch structure survives. Groups whose
    removal would break one-irregularity are dropped and the remainder
    re-tried, since neighboring groups legitimize each other.
    """
    ids = set()
    for m in marked:
        ids.add(mesh.cell_ids[m] if isinstance(m, (int, np.integer)) else m)
    groups = {}
    for root, path in ids:
        if len(path) >= 2:
            groups.setdefault((root, path[:-2]), set()).add(path[-2:])
    cand = {gp for gp, tails in groups.items() if len(tails) == 16
            and all((gp[0], gp[1] + t) in mesh.cell_index
                    for t in tails)}
    while cand:
        removed = {(r, p + (d,)) for r, p in cand for d in range(4)}
        trial = Mesh(mesh.grid, mesh.subdivided - removed)
        bad = set()
        for r, p in cand:
            lvl = len(p) + 1
            for d in range(4):
                child = (r, p + (d,))
                if any(len(nb[1]) - lvl > 1
                       for side in SIDES
                       for nb in trial.neighbors(child, side)):
                    bad.add((r, p))
                    break
        if not bad:
            return trial
        cand -= bad
    return mesh


def _adapt_meshes(slab_list, cell_values, refine_thetas, bottom_theta):
    """Per-slab spatial adaptation: top-fraction patchwise refinement,
    then group coarsening of the untouched bottom fraction.

    Slabs whose adapted meshes come out identical share one Mesh object,
    so downstream caches keyed on object identity (dof maps, geometry,
    factorized slab operators) are hit instead of rebuilt per slab.
    """
    new_meshes = []
    seen = {}
    for n, slab in enumerate(slab_list):
        vals = cell_values[n]
        refine = mark_top_fraction(vals, refine_thetas[n])
        mesh = slab.mesh
        if refine.size:
            refined = mesh.refine_cells([mesh.cell_ids[i] for i in refine],
                                        patchwise=True)
        else:
            refined = mesh
        pool = mark_bottom_fraction(vals, bottom_theta)
        keep = set(refine.tolist())
        survivors = [mesh.cell_ids[i] for i in pool
                     if i not in keep
                     and mesh.cell_ids[i] in refined.cell_index]
        new = (coarsen_patch_groups(refined, survivors)
               if survivors else refined)
        key = (id(new.grid), new.subdivided)
        new_meshes.append(seen.setdefault(key, new))
    return slab_list.replace_meshes(new_meshes)


def _slab_dofs(slab_list, accounting):
    total = 0
    cells = 0
    for slab in slab_list:
        cells = max(cells, slab.mesh.n_cells)
        if accounting == "flow":
            total += 2 * fc.dof_map(slab.mesh, 2).n_dofs \
                + fc.dof_map(slab.mesh, 1).n_dofs
        else:
            total += fc.dof_map(slab.mesh, 1).n_dofs
    return total, cells


def run_dwr_loop(scenario, max_loops, tol=None, callback=None):
    """Drive the adaptive algorithm and return the run state.

    The returned dict holds the trace rows, the final slab lists and the
    last indicator set. A row is recorded every loop before adaptation;
    the loop stops early when the goal error measure drops under tol.
    """
    from .slab_manager import init_slab_lists

    tun = scenario.tuning
    goal = scenario.goal
    flow_list, transport_list = init_slab_lists(
        scenario.T, scenario.n_flow0, scenario.n_transport0,
        scenario.flow_mesh0, scenario.transport_mesh0)

    trace = []
    state = {"trace": trace, "gate_history": []}
    for loop in range(1, max_loops + 1):
        audit_alignment(flow_list, transport_list)
        assert all(s.mesh.audit_one_irregular() <= 1 for s in flow_list)
        assert all(s.mesh.audit_one_irregular() <= 1
                   for s in transport_list)
        flow_audit = ss.solve_flow_forward(flow_list, scenario)
        transport_audit = ts.solve_primal_forward(transport_list,
                                                  flow_list, scenario)
        ts.solve_dual_backward(transport_list, flow_list, scenario, goal)
        ind = ee.compute_transport_indicators(transport_list, flow_list,
                                              scenario, goal)
        kelly_cells, kelly_slabs, eta_h_f = ee.compute_kelly_flow(flow_list)
        jump_norms, eta_sigma_f = ee.flow_temporal_indicator(
            flow_list, getattr(scenario, "flow_initial", None))

        if scenario.exact_goal_error is not None:
            goal_err = scenario.exact_goal_error(transport_list, goal)
        else:
            goal_err = np.nan
        if scenario.exact_flow_error is not None:
            flow_err = scenario.exact_flow_error(flow_list)
        else:
            flow_err = eta_sigma_f + eta_h_f

        dofs_f, cells_f = _slab_dofs(flow_list, "flow")
        dofs_t, cells_t = _slab_dofs(transport_list, "transport")
        row = {
            "loop": loop,
            "n_flow": len(flow_list),
            "cells_flow": cells_f,
            "dofs_flow": dofs_f,
            "flow_err": flow_err,
            "n_transport": len(transport_list),
            "cells_transport": cells_t,
            "dofs_transport": dofs_t,
            "goal_err": goal_err,
            "eta_h": ind["eta_h"],
            "eta_tau": ind["eta_tau"],
            "i_eff": ee.effectivity_index(ind["eta_tau"], ind["eta_h"],
                                          goal_err)
            if np.isfinite(goal_err) and goal_err != 0.0 else np.nan,
            "audit_div": flow_audit["div"],
            "audit_orth_flow": flow_audit["orth"],
            "audit_orth_transport": transport_audit,
        }
        trace.append(row)
        state.update(flow_list=flow_list, transport_list=transport_list,
                     indicators=ind, kelly_cells=kelly_cells,
                     kelly_slabs=kelly_slabs, jump_norms=jump_norms,
                     eta_sigma_f=eta_sigma_f, eta_h_f=eta_h_f)
        if callback is not None:
            callback(loop, state)

        err_measure = goal_err if np.isfinite(goal_err) else abs(
            ind["eta_tau"] + ind["eta_h"])
        if tol is not None and abs(err_measure) < tol:
            break
        if loop == max_loops:
            break

        # flow adaptation gate; the exact variant replaces the flow
        # surrogates with the reconstructed flow error but keeps the
        # transport estimate on the right-hand side
        if scenario.flow_gate_exact:
            gate = flow_err > tun["varpi"] * abs(ind["eta_tau"]) \
                + abs(ind["eta_h"])
        else:
            gate = decide_flow_refinement(eta_sigma_f, eta_h_f,
                                          ind["eta_tau"], ind["eta_h"],
                                          tun["varpi"])
        state["gate_history"].append(bool(gate))
        if gate:
            window = tun.get("flow_time_window")
            eligible = [n for n, s in enumerate(flow_list)
                        if window is None or s.t0 < window]
            vals = np.asarray([jump_norms[n] for n in eligible])
            local = mark_top_fraction(vals, tun["th_sigma_f"])
            tmarks = sorted(eligible[i] for i in local)
            tset = set(tmarks)
            same_mesh = all(s.mesh is flow_list[0].mesh for s in flow_list)
            if same_mesh and tun["th_h1_f"] == tun["th_h2_f"]:
                # shared spatial mesh and uniform marking fraction: rank on
                # the time-integrated cell indicator (the cellwise content
                # of the rollup), which keeps every slab on one adapted
                # mesh object and one factorized operator per sweep
                agg = np.sqrt(sum(s.tau * kc * kc
                                  for s, kc in zip(flow_list, kelly_cells)))
                flow_list = _adapt_meshes(
                    flow_list, [agg] * len(flow_list),
                    [tun["th_h1_f"]] * len(flow_list), tun["th_bot_f"])
            else:
                thetas = [tun["th_h1_f"] if n in tset else tun["th_h2_f"]
                          for n in range(len(flow_list))]
                flow_list = _adapt_meshes(flow_list, kelly_cells, thetas,
                                          tun["th_bot_f"])
            flow_list = flow_list.split(tmarks)

        # transport adaptation
        at, ah = abs(ind["eta_tau"]), abs(ind["eta_h"])
        mode = decide_transport_mode(at, ah, tun["omega"])
        th_tau = tun["th_tau_t"](at, ah) if callable(tun["th_tau_t"]) \
            else tun["th_tau_t"]
        th_h1 = tun["th_h1_t"](at, ah) if callable(tun["th_h1_t"]) \
            else tun["th_h1_t"]
        th_h2 = tun["th_h2_t"](at, ah) if callable(tun["th_h2_t"]) \
            else tun["th_h2_t"]
        tmarks = []
        if mode in ("time", "both"):
            tmarks = mark_top_fraction(ind["eta_tau_slabs"],
                                       th_tau).tolist()
        if mode in ("space", "both"):
            tset = set(tmarks)
            thetas = [th_h1 if n in tset else th_h2
                      for n in range(len(transport_list))]
            transport_list = _adapt_meshes(transport_list,
                                           ind["eta_h_cells"], thetas,
                                           tun["th_bot_t"])
        transport_list = transport_list.split(tmarks)
        transport_list = transport_list.split_at_times(
            flow_list.breakpoints())

    state.update(flow_list=flow_list, transport_list=transport_list)
    return state
