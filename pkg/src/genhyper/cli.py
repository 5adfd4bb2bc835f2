"""Command-line pipeline: synth-gen, fit, score-train, sample, sample-cond, field-sample, stress-eval, eval, eig."""
import argparse
import json
import logging
import sys

import numpy as np

from .errors import NumericalError, ValidationError

log = logging.getLogger("genhyper")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 2, 3


def _floats(text, n=None, name="value"):
    try:
        vals = [float(v) for v in str(text).split(",")]
    except ValueError:
        raise ValidationError(f"{name}: cannot parse {text!r} as comma-separated numbers") from None
    if n is not None and len(vals) not in ((n,) if isinstance(n, int) else n):
        raise ValidationError(f"{name}: expected {n} values, got {len(vals)}")
    return vals


def _schedule(args, base=None):
    from .diffusion import DiffusionSchedule
    sched = base or DiffusionSchedule()
    return sched.with_steps(args.steps) if getattr(args, "steps", None) else sched


def cmd_synth_gen(args):
    from .fileio import save_dataset
    from .synth import SynthConfig, synth_generate
    cfg = SynthConfig(n=args.n, seed=args.seed, n_points=args.n_points, lam_min=args.lam_min, lam_max=args.lam_max)
    pop = synth_generate(cfg)
    save_dataset(pop, args.out)
    print(f"wrote {len(pop)} individuals to {args.out}")


def cmd_fit(args):
    from .fileio import load_dataset, save_fit
    from .node import FitConfig, NodeArch, fit_population
    data = load_dataset(args.data)
    cfg = FitConfig(lr=args.lr, lr_final=args.lr_final, iterations=args.iterations)
    fit = fit_population(data, NodeArch(args.arch), cfg, seed=args.seed)
    save_fit(fit, args.out)
    print(f"fitted {len(fit.names)} individuals; max per-curve relative MAE {fit.curve_rel_mae.max():.4%}")


def cmd_score_train(args):
    from .diffusion import ScoreTrainConfig
    from .fileio import load_fit, save_score
    from .pipeline import train_population_score
    fit = load_fit(args.model)
    hidden = tuple(int(h) for h in _floats(args.hidden, name="--hidden"))
    cfg = ScoreTrainConfig(hidden=hidden, lr=args.lr, lr_final=args.lr_final, epochs=args.epochs,
                           batch=args.batch, target=args.target)
    res, st = train_population_score(fit, cfg, seed=args.seed)
    save_score(res.score, args.out, st, fit, cfg.to_dict())
    print(f"trained score on {len(fit.names)} parameter vectors; final epoch loss {res.epoch_loss[-1]:.4g}")


def cmd_sample(args):
    from .diffusion import reverse_sde_sample
    from .fileio import load_score, save_samples
    score, st, _ = load_score(args.score)
    x = reverse_sde_sample(score, _schedule(args, score.schedule), np.random.default_rng(args.seed),
                           args.n, score.dim, st)
    save_samples(x, args.out)
    print(f"wrote {args.n} samples to {args.out}")


def _observation(args, score, st, fit):
    from .fileio import load_observations
    from .pipeline import param_observation, stress_observation
    parsed = load_observations(args.obs)
    if parsed[0] == "param":
        if st is None:
            raise ValidationError("direct parameter conditioning needs a standardizer in the score file")
        return param_observation(st, parsed[1], parsed[2], args.sigma)
    if fit is None:
        raise ValidationError("stress conditioning needs the fitted model embedded in the score file")
    return stress_observation(fit, st, parsed[1], args.sigma)


def cmd_sample_cond(args):
    from .diffusion import conditional_sample
    from .fileio import load_score, save_samples
    score, st, fit = load_score(args.score)
    obs = _observation(args, score, st, fit)
    x = conditional_sample(score, obs, _schedule(args, score.schedule), np.random.default_rng(args.seed),
                           args.n, score.dim, st)
    save_samples(x, args.out)
    print(f"wrote {args.n} conditioned samples to {args.out}")


def _field_sampler(args):
    from .fields import GPSampler, MaternConfig, MaternSampler, assemble_laplace_fem, grid_points, laplace_eigenbasis
    if bool(args.grid) == bool(args.mesh):
        raise ValidationError("give exactly one of --grid or --mesh")
    if args.grid:
        nx, ny, lx, ly = _floats(args.grid, 4, "--grid")
        if nx < 1 or ny < 1 or nx != int(nx) or ny != int(ny):
            raise ValidationError("--grid needs positive integer nx, ny")
        pts = grid_points(int(nx), int(ny), lx, ly)
        return GPSampler(pts, _floats(args.ell, (1, 2), "--ell")), pts
    mesh = _load_mesh_arg(args.mesh)
    K, M = assemble_laplace_fem(mesh)
    basis = laplace_eigenbasis(K, M, args.neig)
    sampler = MaternSampler(basis, MaternConfig(ell=_floats(args.ell, 1, "--ell")[0], nu=args.nu))
    return sampler, mesh.nodes


def _load_mesh_arg(text):
    from .fileio import load_mesh
    parts = text.split(",")
    if len(parts) != 2:
        raise ValidationError("--mesh expects nodes.txt,tris.txt")
    return load_mesh(*parts)


def cmd_field_sample(args):
    from .diffusion import conditional_score_fn
    from .fields import field_reverse_sde
    from .fileio import load_score, save_field
    score, st, fit = load_score(args.score)
    sampler, pts = _field_sampler(args)
    score_fn = score
    if args.obs:
        if args.sigma is None:
            raise ValidationError("--obs needs --sigma")
        score_fn = conditional_score_fn(score, _observation(args, score, st, fit))
    sched = _schedule(args, score.schedule)
    prov = {"schedule": sched.to_dict(), "ell": args.ell, "seed": args.seed,
            "sampler": "grid" if args.grid else "mesh"}
    pf = field_reverse_sde(score_fn, sampler, sched, np.random.default_rng(args.seed),
                           score.dim, args.n_fields, st, points=pts, provenance=prov)
    save_field(pf, args.out)
    print(f"wrote {pf.n_fields} field(s) over {pts.shape[0]} points to {args.out}")


def cmd_stress_eval(args):
    from .fileio import load_model_any, load_samples, save_qoi
    from .metrics import qoi_stress_samples
    fit = load_model_any(args.model)
    phis = load_samples(args.phi)
    if phis.shape[1] != fit.arch.n_phi:
        raise ValidationError(f"samples have {phis.shape[1]} columns, model expects {fit.arch.n_phi}")
    q = qoi_stress_samples(phis, fit.shared, fit.arch, args.protocol, args.lam)
    save_qoi(q.values[:, 0], args.out)
    print(f"wrote {len(q)} stress values to {args.out}")


def cmd_eval(args):
    from .fileio import atomic_write_json, load_qoi
    from .metrics import energy_distance_sq, gmm_fit_em, kde_grid
    a, b = load_qoi(args.a), load_qoi(args.b)
    ed2 = energy_distance_sq(a, b)
    result = {"energy_distance_sq": ed2, "energy_distance": float(np.sqrt(ed2))}
    print(f"energy_distance_sq {ed2:.6g}\nenergy_distance {np.sqrt(ed2):.6g}")
    if args.gmm:
        gm = gmm_fit_em(a, args.gmm, seed=args.seed)
        result["gmm"] = {"weights": gm.weights.tolist(), "means": gm.means.tolist(),
                         "covs": gm.covs.tolist(), "converged": gm.converged}
        print(f"gmm k={args.gmm} weights {np.round(gm.weights, 4).tolist()} converged={gm.converged}")
    if args.kde:
        for name, x in (("a", a), ("b", b)):
            axes, dens = kde_grid(x, args.kde)
            result[f"kde_{name}"] = {"axes": [ax.tolist() for ax in axes], "density": dens.tolist()}
    if args.out:
        atomic_write_json(args.out, {"version": 1, "kind": "eval", **result})


def cmd_eig(args):
    from .fields import assemble_laplace_fem, laplace_eigenbasis
    from .fileio import save_basis
    mesh = _load_mesh_arg(args.mesh)
    K, M = assemble_laplace_fem(mesh)
    basis = laplace_eigenbasis(K, M, args.neig)
    save_basis(basis, args.out)
    print("eigenvalues " + " ".join(f"{v:.6g}" for v in basis.values[:min(10, basis.n_eig)]))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file of option defaults (keys are long option names)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="genhyper", description="Generative hyperelastic population models")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    s = add("synth-gen", cmd_synth_gen, "synthetic May-Newman population")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-points", type=int, default=20)
    s.add_argument("--lam-min", type=float, default=1.0)
    s.add_argument("--lam-max", type=float, default=1.25)

    s = add("fit", cmd_fit, "fit shared NODE model and per-individual parameters")
    s.add_argument("--data", required=True)
    s.add_argument("--arch", choices=["iso2", "aniso5"], default="iso2")
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, default=3000)
    s.add_argument("--lr", type=float, default=1e-2)
    s.add_argument("--lr-final", type=float, default=1e-3)

    s = add("score-train", cmd_score_train, "train the score network on fitted parameters")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--target", choices=["exact", "denoising"], default="exact")
    s.add_argument("--epochs", type=int, default=2000)
    s.add_argument("--batch", type=int, default=128)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--lr-final", type=float, default=1e-5)
    s.add_argument("--hidden", default="256,256,256,256")

    s = add("sample", cmd_sample, "unconditional reverse-SDE samples")
    s.add_argument("--score", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)

    s = add("sample-cond", cmd_sample_cond, "samples conditioned on observations")
    s.add_argument("--score", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--sigma", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--steps", type=int)

    s = add("field-sample", cmd_field_sample, "spatially correlated parameter fields")
    s.add_argument("--score", required=True)
    s.add_argument("--grid", help="nx,ny,Lx,Ly")
    s.add_argument("--mesh", help="nodes.txt,tris.txt")
    s.add_argument("--ell", required=True)
    s.add_argument("--neig", type=int)
    s.add_argument("--nu", type=float, default=2.5)
    s.add_argument("--n-fields", type=int, default=1)
    s.add_argument("--obs")
    s.add_argument("--sigma", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--steps", type=int)

    s = add("stress-eval", cmd_stress_eval, "sigma_xx of parameter samples at one stretch")
    s.add_argument("--model", required=True)
    s.add_argument("--phi", required=True)
    s.add_argument("--protocol", required=True)
    s.add_argument("--lambda", dest="lam", type=float, required=True)
    s.add_argument("--out", required=True)

    s = add("eval", cmd_eval, "energy distance, GMM baseline and KDE grids")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--gmm", type=int)
    s.add_argument("--kde", type=int, metavar="GRID")
    s.add_argument("--out")

    s = add("eig", cmd_eig, "Laplace eigenbasis of a triangle mesh")
    s.add_argument("--mesh", required=True)
    s.add_argument("--neig", type=int)
    s.add_argument("--out", required=True)
    return p


def _apply_config(parser, argv):
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or not argv or argv[0] not in parser._subparsers._group_actions[0].choices:
        return parser.parse_args(argv)
    try:
        with open(known.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError("config must be a JSON object")
    sub = parser._subparsers._group_actions[0].choices[argv[0]]
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    unknown = set(cfg) - {a.dest for a in sub._actions}
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    # config supplies defaults (which satisfy required options); explicit flags win
    for a in sub._actions:
        if a.dest in cfg:
            a.required = False
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def main(argv=None):
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
