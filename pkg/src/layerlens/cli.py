"""Command-line pipeline driver.

Each subcommand reads the previous stage's files under ``--out`` and writes
its own, so the run can pause for days between mask generation and label
analysis (the crowdsourcing gap) without holding anything in memory:

    extract -> cluster -> masks -> serve -> analyze-labels -> assemble
            -> global / render / report

Every artifact embeds the hash of the config that produced it; re-running a
stage with unchanged inputs and seed reproduces identical bytes.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import zlib
from pathlib import Path

import numpy as np

from layerlens import explain, labels as labels_mod, report as report_mod
from layerlens.bundle import ActivationBundle, bundle_from_trace, load_bundle, save_bundle
from layerlens.embeddings import FileEmbeddings, TrigramEmbeddings
from layerlens.errors import EmptySaliencyError, LayerlensError, NoPositiveEvidenceError, ValidationError
from layerlens.masks import DEFAULT_LADDER, load_png, masked_series, render_inv, save_png
from layerlens.model import backward_to_layer, forward, load_model
from layerlens.saliency import (
    ClusterMap,
    LayerClusters,
    analyze_layer,
    gradcam_weights,
    load_layer_clusters,
    save_layer_clusters,
)
from layerlens.service import GamePool, GameService, ServiceConfig, create_app

CONFIG_ENV = "LAYERLENS_CONFIG"


def config_hash(values: dict) -> str:
    return hashlib.sha256(json.dumps(values, sort_keys=True).encode()).hexdigest()[:16]


def stage_config(out: Path, values: dict) -> str:
    """Record a stage's full config under runs/ and return its hash."""
    chash = config_hash(values)
    runs = Path(out) / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    doc = {"config": values, "config_hash": chash}
    (runs / f"{values['stage']}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return chash


def derive_seed(base: int, *parts: str) -> int:
    mixed = base
    for part in parts:
        mixed = (mixed * 1000003 + zlib.crc32(part.encode())) % (2**63)
    return mixed


def hwc_to_chw(image: np.ndarray) -> np.ndarray:
    return np.transpose(image, (2, 0, 1))


def chw_to_hwc(image: np.ndarray) -> np.ndarray:
    return np.transpose(image, (1, 2, 0))


def require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise ValidationError(f"missing {path}; run `layerlens {stage}` first")
    return path


def list_images(out: Path, stage: str) -> list[str]:
    bundles = require(out / "bundles", stage)
    return sorted(p.name for p in bundles.iterdir() if (p / "bundle.json").is_file())


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def cmd_extract(args) -> None:
    out = Path(args.out)
    chash = stage_config(
        out,
        {
            "stage": "extract",
            "model": str(args.model or ""),
            "bundle": str(args.bundle or ""),
            "layers": args.layers or "",
            "class_index": args.class_index,
        },
    )
    if args.bundle:
        bundle = load_bundle(args.bundle)
        name = Path(bundle.image).stem or "bundle"
        save_bundle(
            out / "bundles" / name,
            bundle.image,
            bundle.class_index,
            bundle.class_names,
            bundle.layers,
            config_hash=chash,
        )
        _write_fmaps(out / "bundles" / name, bundle, chash)
        print(f"ingested bundle {name}: {len(bundle.layers)} layers")
        return
    if not args.model or not args.image or not args.layers:
        raise ValidationError("extract needs --model, --image, and --layers (or --bundle)")
    model = load_model(args.model)
    layer_names = [name.strip() for name in args.layers.split(",") if name.strip()]
    for image_path in args.image:
        image_path = Path(image_path)
        image = load_png(image_path)
        name = image_path.stem
        save_png(out / "images" / f"{name}.png", image, config_hash=chash)
        trace = forward(model, hwc_to_chw(image))
        class_index = trace.predicted if args.class_index is None else args.class_index
        grads = [backward_to_layer(model, trace, class_index, ln) for ln in layer_names]
        layers = bundle_from_trace(model, trace, grads, image=name, class_index=class_index)
        save_bundle(
            out / "bundles" / name,
            name,
            class_index,
            model.class_names,
            layers,
            config_hash=chash,
        )
        bundle = load_bundle(out / "bundles" / name)
        _write_fmaps(out / "bundles" / name, bundle, chash)
        print(
            f"{name}: predicted {model.class_names[trace.predicted]!r} "
            f"(p={trace.probabilities[trace.predicted]:.3f}), "
            f"extracted {len(layer_names)} layers for class {model.class_names[class_index]!r}"
        )


def _write_fmaps(directory: Path, bundle: ActivationBundle, chash: str) -> None:
    doc = {
        "version": 1,
        "config_hash": chash,
        "layers": {
            layer.name: {
                "channels": layer.activations.shape[0],
                "weights": gradcam_weights(layer.activations, layer.gradients, layer.name)
                .weights.tolist(),
            }
            for layer in bundle.layers
        },
    }
    (directory / "fmaps.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def parse_tau(spec: str | None) -> dict[str, float] | float | None:
    if spec is None:
        return None
    if "=" not in spec:
        return float(spec)
    out = {}
    for part in spec.split(","):
        layer, _, value = part.partition("=")
        out[layer.strip()] = float(value)
    return out


def cmd_cluster(args) -> None:
    out = Path(args.out)
    tau = parse_tau(args.tau_f)
    chash = stage_config(
        out,
        {
            "stage": "cluster",
            "seed": args.seed,
            "tau_f": args.tau_f or "",
            "k_min": args.k_min,
            "k_max": args.k_max,
        },
    )
    for name in list_images(out, "extract"):
        bundle = load_bundle(out / "bundles" / name)
        for layer in bundle.layers:
            fset = gradcam_weights(layer.activations, layer.gradients, layer.name)
            layer_tau = tau.get(layer.name) if isinstance(tau, dict) else tau
            try:
                result = analyze_layer(
                    fset,
                    seed=derive_seed(args.seed, name, layer.name),
                    tau_f=layer_tau,
                    k_min=args.k_min,
                    k_max=args.k_max,
                )
            except NoPositiveEvidenceError as err:
                raise ValidationError(f"{name}: {err}") from err
            save_layer_clusters(out / "clusters" / name / layer.name, result, config_hash=chash)
            print(
                f"{name}/{layer.name}: {result.retained_count}/{result.channel_count} channels "
                f"-> {len(result.maps)} clusters ({len(result.surviving_ids)} kept, "
                f"retained weight {result.retained_fraction * 100:.1f}%)"
            )


def iter_layer_clusters(out: Path, name: str) -> list[LayerClusters]:
    bundle = load_bundle(out / "bundles" / name)
    results = []
    for layer in bundle.layers:
        directory = out / "clusters" / name / layer.name
        require(directory / "clusters.json", "cluster")
        results.append(load_layer_clusters(directory))
    return results


def parse_ladder(spec: str | None) -> tuple[float, ...]:
    if not spec:
        return DEFAULT_LADDER
    return tuple(float(x) for x in spec.split(","))


def cmd_masks(args) -> None:
    out = Path(args.out)
    ladder = parse_ladder(args.ladder)
    chash = stage_config(out, {"stage": "masks", "ladder": list(ladder), "screening": args.screening or ""})
    items = []
    class_names = None
    for name in list_images(out, "extract"):
        bundle = load_bundle(out / "bundles" / name)
        class_names = bundle.class_names
        image = load_png(require(out / "images" / f"{name}.png", "extract"))
        for result in iter_layer_clusters(out, name):
            for cmap in result.surviving():
                ref = f"{name}/{cmap.id}"
                try:
                    series = masked_series(image, cmap, ladder, image_ref=name)
                except EmptySaliencyError:
                    print(f"skipping {ref}: empty saliency, nothing to reveal")
                    continue
                levels = []
                for i, composite in enumerate(series.composites):
                    rel = f"masks/{name}/{cmap.id}/level{i}.png"
                    save_png(out / rel, composite, config_hash=chash)
                    levels.append(rel)
                items.append(
                    {
                        "map_id": ref,
                        "true_class": bundle.class_names[bundle.class_index],
                        "levels": levels,
                        "weight": cmap.weight,
                        "is_screening": False,
                    }
                )
    if not items:
        raise ValidationError("no cluster maps to mask; run `layerlens cluster` first")
    _mark_screening(items, args.screening)
    manifest = {
        "version": 1,
        "config_hash": chash,
        "ladder": list(ladder),
        "class_names": class_names,
        "items": items,
    }
    path = out / "masks" / "games.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    screening = sum(1 for it in items if it["is_screening"])
    print(f"wrote {len(items)} game items ({screening} screening) to {path}")


def _mark_screening(items: list[dict], spec: str | None) -> None:
    """Operator curation of screening items.

    ``auto:N`` marks the N heaviest cluster maps (weight is a proxy for how
    recognizable the revealed region is); otherwise a comma-separated list
    of map refs marks them explicitly.
    """
    if not spec:
        return
    if spec.startswith("auto:"):
        n = int(spec.split(":", 1)[1])
        for item in sorted(items, key=lambda it: -it["weight"])[:n]:
            item["is_screening"] = True
        return
    wanted = {ref.strip() for ref in spec.split(",") if ref.strip()}
    known = {item["map_id"] for item in items}
    missing = wanted - known
    if missing:
        raise ValidationError(f"unknown screening map refs: {sorted(missing)}")
    for item in items:
        if item["map_id"] in wanted:
            item["is_screening"] = True


def cmd_serve(args) -> None:
    out = Path(args.out)
    config_path = args.config or os.environ.get(CONFIG_ENV)
    config = ServiceConfig.load(config_path) if config_path else ServiceConfig()
    if args.host:
        config.host = args.host
    if args.port:
        config.port = args.port
    pool = GamePool.load(require(out / "masks" / "games.json", "masks"))
    log_path = out / "service" / "events.jsonl"
    service = GameService.replay(pool, log_path, config=config)
    app = create_app(service, image_root=out, static_dir=args.static or config.static_dir or None)
    import uvicorn

    print(f"serving {len(pool.items)} game items on {config.host}:{config.port}")
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")


def cmd_analyze_labels(args) -> None:
    out = Path(args.out)
    chash = stage_config(out, {"stage": "analyze-labels", "embeddings": str(args.embeddings or "")})
    if args.labels:
        export_path = Path(args.labels)
    elif args.service_data:
        pool = GamePool.load(require(out / "masks" / "games.json", "masks"))
        service = GameService.replay(pool, Path(args.service_data) / "events.jsonl")
        export_path = service.write_label_export(out / "labels" / "export.jsonl")
        print(f"exported {len(service.export_labels())} label records from the event log")
    else:
        export_path = out / "service" / "export.jsonl"
        if not export_path.is_file():
            pool = GamePool.load(require(out / "masks" / "games.json", "masks"))
            log_path = out / "service" / "events.jsonl"
            require(log_path, "serve (or pass --labels)")
            service = GameService.replay(pool, log_path)
            export_path = service.write_label_export(out / "labels" / "export.jsonl")
            print(f"exported {len(service.export_labels())} label records from the event log")
    records = labels_mod.load_label_export(export_path)
    provider = FileEmbeddings.load(args.embeddings) if args.embeddings else TrigramEmbeddings()
    grouped = labels_mod.analyze_records(records, provider)
    for map_ref, groups in grouped.items():
        path = out / "labels" / "groups" / (map_ref.replace("/", "__") + ".json")
        labels_mod.save_groups(path, map_ref, groups, config_hash=chash)
    total = sum(len(g) for g in grouped.values())
    print(f"scored {total} label groups across {len(grouped)} cluster maps")


def _load_groups_for(out: Path, map_ref: str) -> list[labels_mod.LabelGroup]:
    path = out / "labels" / "groups" / (map_ref.replace("/", "__") + ".json")
    require(path, "analyze-labels")
    _, groups = labels_mod.load_groups(path)
    return groups


def cmd_assemble(args) -> None:
    out = Path(args.out)
    chash = stage_config(out, {"stage": "assemble"})
    for name in list_images(out, "extract"):
        bundle = load_bundle(out / "bundles" / name)
        predicted = bundle.class_names[bundle.class_index]
        layer_tuples = []
        for result in iter_layer_clusters(out, name):
            pairs = []
            for cmap in result.surviving():
                groups = _load_groups_for(out, f"{name}/{cmap.id}")
                if not groups:
                    raise ValidationError(f"cluster map {name}/{cmap.id} has no scored labels")
                pairs.append((cmap, groups))
            merged = labels_mod.merge_same_top_label(pairs)
            merged_result = LayerClusters(
                layer=result.layer,
                maps=[cmap for cmap, _ in merged],
                retained_fraction=result.retained_fraction,
                retained_count=result.retained_count,
                positive_count=result.positive_count,
                channel_count=result.channel_count,
                tau_f=result.tau_f,
                silhouette=result.silhouette,
                candidates=result.candidates,
                surviving_ids=[cmap.id for cmap, _ in merged],
            )
            save_layer_clusters(
                out / "explanations" / "merged" / name / result.layer, merged_result, config_hash=chash
            )
            layer_tuples.append(
                (
                    result.layer,
                    [
                        (
                            f"{name}/{cmap.id}",
                            cmap.weight,
                            [(g.representative, g.score) for g in groups],
                        )
                        for cmap, groups in merged
                    ],
                )
            )
        inv = explain.assemble_inv(name, predicted, layer_tuples)
        path = explain.export_explanation(inv, out / "explanations" / f"{name}.inv.json", chash)
        print(f"{name}: explanation with {sum(len(l.entries) for l in inv.layers)} cluster maps -> {path}")


class MapResolver:
    """Resolve ``image/layer.cN`` refs against the merged then base stores."""

    def __init__(self, out: Path):
        self.out = out
        self._cache: dict[Path, LayerClusters] = {}

    def _load(self, directory: Path) -> LayerClusters | None:
        if directory in self._cache:
            return self._cache[directory]
        if not (directory / "clusters.json").is_file():
            return None
        result = load_layer_clusters(directory)
        self._cache[directory] = result
        return result

    def __call__(self, ref: str) -> ClusterMap:
        image, _, map_id = ref.partition("/")
        layer = map_id.split(".", 1)[0]
        for root in ("explanations/merged", "clusters"):
            result = self._load(self.out / root / image / layer)
            if result is None:
                continue
            for cmap in result.maps:
                if cmap.id == map_id:
                    return cmap
        raise ValidationError(f"dangling cluster-map ref: {ref!r}")

    def exists(self, ref: str) -> bool:
        try:
            self(ref)
            return True
        except ValidationError:
            return False


def cmd_global(args) -> None:
    out = Path(args.out)
    chash = stage_config(out, {"stage": "global", "class": args.class_name, "layer": args.layer, "top_n": args.top_n})
    exp_dir = require(out / "explanations", "assemble")
    invs = []
    for path in sorted(exp_dir.glob("*.inv.json")):
        inv = explain.import_explanation(path)
        if inv.predicted_class == args.class_name:
            invs.append(inv)
    if not invs:
        raise ValidationError(f"no explanations for class {args.class_name!r}; run `layerlens assemble` first")
    result = explain.aggregate_global(invs, args.layer, top_n=args.top_n, class_name=args.class_name)
    resolver = MapResolver(out)
    for entry in result.entries:
        if not resolver.exists(entry.exemplar):
            raise ValidationError(f"dangling exemplar ref: {entry.exemplar!r}")
    path = explain.export_explanation(
        result, out / "explanations" / "global" / f"{args.class_name}__{args.layer}.json", chash
    )
    summary = ", ".join(f"{e.label}({e.weight:.2f}x{e.support})" for e in result.entries)
    print(f"global explanation for {args.class_name}/{args.layer}: {summary} -> {path}")


def cmd_render(args) -> None:
    out = Path(args.out)
    exp_dir = require(out / "explanations", "assemble")
    resolver = MapResolver(out)
    chash = stage_config(out, {"stage": "render"})
    count = 0
    from PIL import PngImagePlugin

    for path in sorted(exp_dir.glob("*.inv.json")):
        inv = explain.import_explanation(path, map_resolver=resolver.exists)
        image = load_png(require(out / "images" / f"{inv.image}.png", "extract"))
        canvas = render_inv(inv, image, resolver)
        info = PngImagePlugin.PngInfo()
        info.add_text("config_hash", chash)
        target = out / "renders" / f"{inv.image}.inv.png"
        target.parent.mkdir(parents=True, exist_ok=True)
        canvas.save(target, format="PNG", pnginfo=info)
        count += 1
        print(f"rendered {target}")
    if count == 0:
        raise ValidationError("no explanations found; run `layerlens assemble` first")


def cmd_report(args) -> None:
    out = Path(args.out)
    per_image = [iter_layer_clusters(out, name) for name in list_images(out, "extract")]
    rows = report_mod.summarize(per_image)
    print(report_mod.format_table(rows))
    print(
        "\nretained weight is the share kept by the channel threshold; "
        "70-90% is the healthy ballpark for informative layers."
    )
    table = report_mod.write_table(rows, out / "report" / "report.tsv")
    figures = report_mod.render_figures(rows, out / "report")
    stages = {}
    runs = out / "runs"
    if runs.is_dir():
        for path in sorted(runs.glob("*.json")):
            stages[path.stem] = json.loads(path.read_text())
    config_doc = out / "report" / "run_config.json"
    config_doc.write_text(json.dumps({"stages": stages}, indent=2, sort_keys=True) + "\n")
    print(f"report table: {table}")
    for fig in figures:
        print(f"figure: {fig}")
    print(f"run config: {config_doc}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layerlens",
        description="Layer-wise CNN explanations from clustered saliency maps and crowd labels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="run the model and export activations/gradients")
    p.add_argument("--model", help="model directory (model.json + blobs)")
    p.add_argument("--bundle", help="ingest a pre-exported activation bundle instead")
    p.add_argument("--image", action="append", help="input image (repeatable)")
    p.add_argument("--layers", help="comma-separated layer names to extract")
    p.add_argument("--class-index", type=int, default=None, help="explain this class (default: predicted)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("cluster", help="threshold, embed, and cluster feature maps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau-f", dest="tau_f", help="weight threshold: global value or layer=value,...")
    p.add_argument("--k-min", dest="k_min", type=int, default=3)
    p.add_argument("--k-max", dest="k_max", type=int, default=8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("masks", help="render the reveal-ladder composites and game manifest")
    p.add_argument("--ladder", help="six decreasing percentiles, e.g. 92,86,80,74,68,62")
    p.add_argument("--screening", help="map refs to mark as screening items, or auto:N")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_masks)

    p = sub.add_parser("serve", help="run the labeling game service")
    p.add_argument("--config", help=f"service config JSON (default ${CONFIG_ENV})")
    p.add_argument("--host")
    p.add_argument("--port", type=int)
    p.add_argument("--static", help="directory of built web client assets to serve")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("analyze-labels", help="cluster and score collected labels")
    p.add_argument("--labels", help="label export (line-delimited JSON)")
    p.add_argument("--service-data", dest="service_data", help="service data dir to export from")
    p.add_argument("--embeddings", help="embedding file directory (default: trigram fallback)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze_labels)

    p = sub.add_parser("assemble", help="merge same-label maps and build explanations")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_assemble)

    p = sub.add_parser("global", help="aggregate explanations for one class and layer")
    p.add_argument("--class", dest="class_name", required=True)
    p.add_argument("--layer", required=True)
    p.add_argument("--top-n", dest="top_n", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_global)

    p = sub.add_parser("render", help="render explanation grids to images")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("report", help="per-layer pipeline report (table + figures)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        args.func(args)
        return 0
    except LayerlensError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # internal failure
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
