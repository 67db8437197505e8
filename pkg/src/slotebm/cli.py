"""Command-line entry points: gen-data, train, decompose, manipulate, eval, ablate, export.

Every command takes an optional flat config file plus dotted-path overrides
(`slotebm train -c desk.cfg --sampler.T 5 --train.steps 20000`) and writes the
fully resolved configuration next to its outputs. The default output root can
be moved with the SLOTEBM_OUT environment variable.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import os
from pathlib import Path

import click
import numpy as np
import torch

from . import config as cfgmod
from .checkpoint import load_model, save_checkpoint
from .datasets import generate_scenes
from .dataset_io import build_dataset, load_dataset
from .energy import compose_energies
from .evaluation import (
    ablation_grid,
    collect_probe_pairs,
    eval_ood_counts,
    evaluate_segmentation,
    match_slots,
    matched_foreground_mass,
    probe_eval,
    probe_fit,
)
from .model import images_to_tensor
from .sampler import sample
from .training import fit, step_seed
from .viz import decomposition_row, masks_row, save_grid


def _out_dir(values: dict) -> Path:
    root = os.environ.get("SLOTEBM_OUT", ".")
    out = Path(root) / values["out.dir"]
    out.mkdir(parents=True, exist_ok=True)
    return out


_override_args = click.argument("overrides", nargs=-1, type=click.UNPROCESSED)
_config_opt = click.option(
    "--config", "-c", "config_file", type=click.Path(exists=True), default=None,
    help="flat config file with key = value lines",
)


@click.group()
def main():
    """Energy-based object discovery toolkit."""


@main.command("gen-data", context_settings={"ignore_unknown_options": True})
@_config_opt
@_override_args
def cmd_gen_data(config_file, overrides):
    """Generate train and test sprite datasets."""
    values = cfgmod.resolve("gen-data", config_file, overrides)
    out = _out_dir(values)
    cfgmod.write_resolved(values, out / "resolved_gen-data.cfg")

    train_cfg = cfgmod.dataset_config(values)
    test_cfg = dataclasses.replace(
        train_cfg, n_scenes=values["gen.test_scenes"], rng_seed=train_cfg.rng_seed + 1
    )
    train_manifest = build_dataset(train_cfg, out / "train.sprites")
    test_manifest = build_dataset(test_cfg, out / "test.sprites")
    summary = {"train": train_manifest, "test": test_manifest}
    (out / "manifest.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    click.echo(f"wrote {train_manifest['n_scenes']} train + {test_manifest['n_scenes']} test "
               f"scenes under {out}")


@main.command("train", context_settings={"ignore_unknown_options": True})
@_config_opt
@click.option("--resume", type=click.Path(exists=True), default=None,
              help="checkpoint to continue from")
@_override_args
def cmd_train(config_file, resume, overrides):
    """Train a model on a generated dataset."""
    values = cfgmod.resolve("train", config_file, overrides)
    out = _out_dir(values)
    cfgmod.write_resolved(values, out / "resolved_train.cfg")

    manifest, records = load_dataset(values["data.path"])
    data_cfg = manifest["config"]
    if (data_cfg["height"], data_cfg["width"]) != (values["model.height"], values["model.width"]):
        raise click.ClickException(
            f"dataset is {data_cfg['height']}x{data_cfg['width']} but the model expects "
            f"{values['model.height']}x{values['model.width']}"
        )
    images = np.stack([r.image for r in records])
    train_cfg = cfgmod.train_config(values)

    def progress(state, metrics):
        click.echo(
            f"step {state.step:>7d} loss {metrics['loss']:.5f} lr {metrics['lr']:.2e} "
            f"grad {metrics['grad_norm']:.3f} ({metrics['elapsed']:.0f}s)"
        )
        return False

    _, final = fit(images, train_cfg, out, resume_from=resume, callback=progress)
    click.echo(f"final checkpoint: {final}")


def _load_scene_batch(data_path, indices):
    _, records = load_dataset(data_path)
    picked = [records[i] for i in indices]
    return picked, images_to_tensor(np.stack([r.image for r in picked]))


@main.command("decompose")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--indices", default="0,1,2,3", help="comma-separated scene indices")
@click.option("--out", "out_dir", default="runs/decompose", show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_decompose(checkpoint, data_path, indices, out_dir, seed):
    """Per-slot reconstructions, masks, and per-step grids for chosen scenes."""
    model, _, _ = load_model(checkpoint)
    idx = [int(i) for i in indices.split(",") if i.strip()]
    records, images = _load_scene_batch(data_path, idx)
    out = Path(os.environ.get("SLOTEBM_OUT", ".")) / out_dir
    out.mkdir(parents=True, exist_ok=True)

    sampler = dataclasses.replace(model.sampler_config, record_trajectory=True)
    with torch.no_grad():
        energy = model.scene_energy(model.encode(images))
        trajectory = sample(energy, sampler, model.init_params,
                            batch_size=images.shape[0], seed=seed)

    for b, (record, scene_index) in enumerate(zip(records, idx)):
        image = record.image
        step_rows = []
        for t in range(trajectory.states.shape[0]):
            with torch.no_grad():
                recon = model.decoder(trajectory.states[t, b : b + 1])
            row = decomposition_row(
                image,
                recon.image[0].permute(1, 2, 0).numpy(),
                recon.slot_rgb[0].permute(0, 2, 3, 1).numpy(),
                recon.masks[0].numpy(),
            )
            step_rows.append(row)
        # final-state decomposition + masks, then the full chain
        save_grid([step_rows[-1]], out / f"scene{scene_index:04d}_decomposition.png")
        with torch.no_grad():
            recon = model.decoder(trajectory.final[b : b + 1])
        save_grid(
            [masks_row(image, recon.image[0].permute(1, 2, 0).numpy(), recon.masks[0].numpy())],
            out / f"scene{scene_index:04d}_masks.png",
        )
        save_grid(step_rows, out / f"scene{scene_index:04d}_steps.png")

    energies = trajectory.energies.numpy()
    lines = ["step," + ",".join(f"scene{i:04d}" for i in idx)]
    lines += [f"{t}," + ",".join(f"{energies[t, b]:.6g}" for b in range(len(idx)))
              for t in range(energies.shape[0])]
    (out / "energies.csv").write_text("\n".join(lines) + "\n")
    click.echo(f"wrote decomposition grids for {len(idx)} scenes under {out}")


@main.command("manipulate")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True))
@click.option("--index-a", default=0, show_default=True)
@click.option("--index-b", default=1, show_default=True)
@click.option("--mode", type=click.Choice(["combine", "subtract"]), required=True)
@click.option("--out", "out_dir", default="runs/manipulate", show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_manipulate(checkpoint, data_path, index_a, index_b, mode, out_dir, seed):
    """Sample latents from a joint (sum) or difference energy of two scenes."""
    model, _, _ = load_model(checkpoint)
    records, images = _load_scene_batch(data_path, [index_a, index_b])
    out = Path(os.environ.get("SLOTEBM_OUT", ".")) / out_dir
    out.mkdir(parents=True, exist_ok=True)

    weight_b = 1.0 if mode == "combine" else -1.0
    sampler = dataclasses.replace(model.sampler_config, record_trajectory=True)
    with torch.no_grad():
        h_a = model.encode(images[0:1])
        h_b = model.encode(images[1:2])
        energy = compose_energies(model.energy, [(h_a, 1.0), (h_b, weight_b)])
        trajectory = sample(energy, sampler, model.init_params, batch_size=1, seed=seed)

    step_rows = []
    for t in range(trajectory.states.shape[0]):
        with torch.no_grad():
            recon = model.decoder(trajectory.states[t])
        step_rows.append(
            decomposition_row(
                records[0].image,
                recon.image[0].permute(1, 2, 0).numpy(),
                recon.slot_rgb[0].permute(0, 2, 3, 1).numpy(),
                recon.masks[0].numpy(),
            )
        )
    # show scene b in the input column of a dedicated first row
    with torch.no_grad():
        final = model.decoder(trajectory.final)
    rows = [
        decomposition_row(
            records[1].image,
            final.image[0].permute(1, 2, 0).numpy(),
            final.slot_rgb[0].permute(0, 2, 3, 1).numpy(),
            final.masks[0].numpy(),
        )
    ]
    save_grid(rows, out / f"{mode}_final.png")
    save_grid(step_rows, out / f"{mode}_steps.png")

    masks = final.masks[0].numpy()
    metrics = {
        "mode": mode,
        "index_a": index_a,
        "index_b": index_b,
        "foreground_mass_a": matched_foreground_mass(masks, records[0]),
        "slot_matches_a": match_slots(masks, records[0]),
        "slot_matches_b": match_slots(masks, records[1]),
    }
    (out / f"{mode}_metrics.json").write_text(json.dumps(metrics, indent=2, default=float))
    click.echo(f"wrote {mode} grids under {out}")


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--data", "data_path", required=True, type=click.Path(exists=True),
              help="held-out dataset for scoring")
@click.option("--probe-data", type=click.Path(exists=True), default=None,
              help="dataset used to fit the property probes (defaults to --data)")
@click.option("--seeds", default=1, show_default=True, help="inference seeds to average over")
@click.option("--ood-k", default=None, type=int, help="slot count for OOD object-count eval")
@click.option("--skip-probes", is_flag=True, default=False)
@click.option("--out", "out_dir", default="runs/eval", show_default=True)
def cmd_eval(checkpoint, data_path, probe_data, seeds, ood_k, skip_probes, out_dir):
    """Foreground ARI (mean over seeds), property probes, and OOD slot counts."""
    model, manifest, _ = load_model(checkpoint)
    _, records = load_dataset(data_path)
    out = Path(os.environ.get("SLOTEBM_OUT", ".")) / out_dir
    out.mkdir(parents=True, exist_ok=True)

    summary: dict = {"checkpoint": str(checkpoint), "step": manifest["step"], "data": str(data_path)}
    per_seed = [evaluate_segmentation(model, records, seed=s) for s in range(seeds)]
    aris = [r["mean_ari"] for r in per_seed]
    summary["foreground_ari"] = {
        "mean": float(np.mean(aris)),
        "sd": float(np.std(aris)),
        "seeds": seeds,
        "n_scenes": per_seed[0]["n_scenes"],
        "n_skipped": per_seed[0]["n_skipped"],
    }
    rows = ["seed,mean_ari,std_ari,n_scenes,n_skipped"]
    rows += [f"{s},{r['mean_ari']:.6f},{r['std_ari']:.6f},{r['n_scenes']},{r['n_skipped']}"
             for s, r in enumerate(per_seed)]
    (out / "segmentation.csv").write_text("\n".join(rows) + "\n")

    if not skip_probes:
        probe_path = probe_data or data_path
        _, probe_records = load_dataset(probe_path)
        z_train, t_train = collect_probe_pairs(model, probe_records, seed=101)
        probe = probe_fit(z_train, t_train)
        z_test, t_test = collect_probe_pairs(model, records, seed=202)
        summary["probes"] = probe_eval(probe, z_test, t_test)

    if ood_k is not None:
        max_objects = max(r.n_objects for r in records)
        if ood_k < max_objects + 1:
            raise click.ClickException(
                f"--ood-k {ood_k} is below max objects + 1 = {max_objects + 1}"
            )
        ood = eval_ood_counts(model, records, ood_k)
        summary["ood_counts"] = {k: v for k, v in ood.items() if k != "per_scene"}

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    click.echo(json.dumps(summary["foreground_ari"], indent=2))
    click.echo(f"full summary: {out / 'summary.json'}")


@main.command("ablate", context_settings={"ignore_unknown_options": True})
@_config_opt
@_override_args
def cmd_ablate(config_file, overrides):
    """Grid search over sampler and energy hyperparameters at reduced budget."""
    values = cfgmod.resolve("ablate", config_file, overrides)
    out = _out_dir(values)
    cfgmod.write_resolved(values, out / "resolved_ablate.cfg")

    data_cfg = cfgmod.dataset_config(values)
    records = generate_scenes(data_cfg)
    test_cfg = dataclasses.replace(
        data_cfg, n_scenes=values["ablate.test_scenes"], rng_seed=data_cfg.rng_seed + 1
    )
    test_records = generate_scenes(test_cfg)
    images = np.stack([r.image for r in records])

    dims = {
        "step_size": values["ablate.step_sizes"],
        "n_steps": values["ablate.n_steps"],
        "noise_scale": values["ablate.noise_scales"],
        "n_blocks": values["ablate.n_blocks"],
    }
    active = {k: v for k, v in dims.items() if v}
    grid = [dict(zip(active, combo)) for combo in itertools.product(*active.values())]
    click.echo(f"{len(grid)} grid cells x {len(values['ablate.seeds'])} seeds")

    rows = ablation_grid(
        cfgmod.train_config(values), grid, images, test_records, out,
        seeds=tuple(values["ablate.seeds"]),
    )
    lines = ["config,ari_mean,ari_sd,n_ok"]
    lines += [
        f"\"{json.dumps(r['config'])}\",{r['ari_mean']:.6f},{r['ari_sd']:.6f},{r['n_ok']}"
        for r in rows
    ]
    (out / "results.csv").write_text("\n".join(lines) + "\n")
    (out / "results.json").write_text(json.dumps(rows, indent=2))
    for r in rows:
        click.echo(f"{r['config']} -> ARI {r['ari_mean']:.3f} +/- {r['ari_sd']:.3f}")


@main.command("export")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def cmd_export(checkpoint, out_path):
    """Re-serialize a checkpoint for external consumers (drops optimizer state)."""
    model, manifest, _ = load_model(checkpoint)
    save_checkpoint(out_path, model, step=manifest["step"], seed=manifest["seed"])
    click.echo(f"exported {out_path}")


if __name__ == "__main__":
    main()
