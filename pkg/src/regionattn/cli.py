"""Command-line front end: ``regionattn <command> [options]``.

Exit status is 0 on success, 1 when a config or request fails validation and
2 when a run fails afterwards. The worker-thread count comes from the
``REGIONATTN_THREADS`` environment variable only.
"""
import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys

import jsonschema
import numpy as np

from . import _kernels
from .dataset import PALETTE, load_dataset, save_dataset, synth_dataset
from .evalkit import EvalReport, attention_inmask_fraction, detect_blob, heatmap_export, iou
from .imageio import read_mask_pgm, read_ppm, write_pgm, write_ppm
from .inpaint import InpaintRequest, inpaint
from .lora import LoRAAdapter
from .masks import compose, patchify_mask, rect_mask
from .model import ModelConfig, ToyDiT, encode_prompt
from .sampler import EntitySpec, GenerationRequest, SamplerConfig, generate
from .trainer import TrainConfig, layout_activation_probe, make_probe_set, pretrain, train

THREADS_ENV = "REGIONATTN_THREADS"


class ValidationError(Exception):
    """Bad user input; reported with exit status 1."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

SAMPLER_KEYS = {"steps", "cfg"}
PATH_KEYS = {"model": None}


@dataclasses.dataclass
class RunConfig:
    """Resolved configuration; every field has a default.

    ``paths.model`` names a base checkpoint. Without one, a freshly
    initialised model is built from ``model`` (useful for smoke tests only).
    """

    model: ModelConfig
    sampler: dict
    train: TrainConfig
    paths: dict
    # model keys set explicitly in the file; a checkpoint must agree with them
    model_keys: tuple = ()

    def to_dict(self):
        return {"model": dataclasses.asdict(self.model), "sampler": dict(self.sampler),
                "train": dataclasses.asdict(self.train), "paths": dict(self.paths)}

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _check_keys(section, given, allowed):
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ValidationError(f"config.{section}: unknown key(s) {', '.join(unknown)}")


def parse_run_config(doc):
    if not isinstance(doc, dict):
        raise ValidationError("config: top level must be an object")
    _check_keys("", doc, {"model", "sampler", "train", "paths"})
    sections = {}
    for name in ("model", "sampler", "train", "paths"):
        sec = doc.get(name, {})
        if not isinstance(sec, dict):
            raise ValidationError(f"config.{name}: must be an object")
        sections[name] = sec
    _check_keys("model", sections["model"], {f.name for f in dataclasses.fields(ModelConfig)})
    _check_keys("sampler", sections["sampler"], SAMPLER_KEYS)
    _check_keys("train", sections["train"], {f.name for f in dataclasses.fields(TrainConfig)})
    _check_keys("paths", sections["paths"], PATH_KEYS)
    try:
        model = ModelConfig(**sections["model"])
        sampler = {"steps": 50, "cfg": 3.0, **sections["sampler"]}
        SamplerConfig(steps=sampler["steps"], cfg=sampler["cfg"])
        train_cfg = TrainConfig(**sections["train"])
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"config: {exc}") from exc
    return RunConfig(model=model, sampler=sampler, train=train_cfg, paths={**PATH_KEYS, **sections["paths"]},
                     model_keys=tuple(sorted(sections["model"])))


def _read_json(path, what):
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as exc:
        raise ValidationError(f"{what}: cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{what}: {path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def load_run_config(path):
    rc = parse_run_config({} if path is None else _read_json(path, "config"))
    base = rc.paths.get("model")
    if base is not None and path is not None and not os.path.isabs(base):
        rc.paths["model"] = os.path.join(os.path.dirname(os.path.abspath(path)), base)
    return rc


# ---------------------------------------------------------------------------
# request files
# ---------------------------------------------------------------------------

REQUEST_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["global_prompt"],
    "properties": {
        "global_prompt": {"type": "string"},
        "negative_prompt": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "entities": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["prompt", "mask"],
                "properties": {
                    "prompt": {"type": "string"},
                    "mask": {
                        "type": "object",
                        "minProperties": 1,
                        "maxProperties": 1,
                        "additionalProperties": False,
                        "properties": {
                            "rect": {"type": "array", "items": {"type": "integer"}, "minItems": 4, "maxItems": 4},
                            "pgm": {"type": "string"},
                        },
                    },
                },
            },
        },
    },
}


def _schema_error_line(err):
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"request: at {where}: {err.message}"


def load_request(path, model_cfg, seed_override=None):
    """Validate a request file and turn it into ``(GenerationRequest-like dict, seed)``."""
    doc = _read_json(path, "request")
    errors = sorted(jsonschema.Draft7Validator(REQUEST_SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        raise ValidationError("\n".join(_schema_error_line(e) for e in errors))
    root = os.path.dirname(os.path.abspath(path))
    entities = []
    for i, e in enumerate(doc.get("entities", [])):
        spec = e["mask"]
        if "rect" in spec:
            x1, y1, x2, y2 = spec["rect"]
            if not (0 <= x1 < x2 <= model_cfg.w and 0 <= y1 < y2 <= model_cfg.h):
                raise ValidationError(f"request: at entities/{i}/mask/rect: box outside the "
                                      f"{model_cfg.w}x{model_cfg.h} canvas or empty")
            mask = rect_mask(model_cfg.h, model_cfg.w, spec["rect"])
        else:
            pgm = spec["pgm"] if os.path.isabs(spec["pgm"]) else os.path.join(root, spec["pgm"])
            try:
                mask = read_mask_pgm(pgm)
            except (OSError, ValueError) as exc:
                raise ValidationError(f"request: at entities/{i}/mask/pgm: {exc}") from exc
            if mask.shape != (model_cfg.h, model_cfg.w):
                raise ValidationError(f"request: at entities/{i}/mask/pgm: mask is {mask.shape[1]}x"
                                      f"{mask.shape[0]}, canvas is {model_cfg.w}x{model_cfg.h}")
        entities.append(EntitySpec(e["prompt"], mask))
    seed = seed_override if seed_override is not None else doc.get("seed", 0)
    return {"global_prompt": doc["global_prompt"], "negative_prompt": doc.get("negative_prompt", ""),
            "entities": entities}, seed


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _load_model(rc):
    """Build or load the base model; a checkpoint's own model config replaces ``rc.model``."""
    path = rc.paths.get("model")
    if path is None:
        return ToyDiT(rc.model)
    try:
        model = ToyDiT.load(path)
    except OSError as exc:
        raise ValidationError(f"config.paths.model: cannot read {path}: {exc.strerror}") from exc
    except ValueError as exc:
        raise ValidationError(f"config.paths.model: {exc}") from exc
    for key in rc.model_keys:
        if getattr(rc.model, key) != getattr(model.cfg, key):
            raise ValidationError(f"config.model.{key} = {getattr(rc.model, key)!r} but the checkpoint "
                                  f"has {getattr(model.cfg, key)!r}")
    rc.model = model.cfg
    return model


def _load_adapter(path, model):
    if path is None:
        return None
    try:
        return LoRAAdapter.load(path, model.cfg)
    except OSError as exc:
        raise ValidationError(f"--adapter: cannot read {path}: {exc.strerror}") from exc


def _parse_dump_attn(text, n_layers):
    try:
        layer, entity = (int(v) for v in text.split(":"))
    except ValueError as exc:
        raise ValidationError(f"--dump-attn expects LAYER:ENTITY, got {text!r}") from exc
    if not 0 <= layer < n_layers or entity < 0:
        raise ValidationError(f"--dump-attn: layer must be in [0, {n_layers}) and entity non-negative")
    return layer, entity


def _write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _sampler_config(rc, seed):
    return SamplerConfig(steps=rc.sampler["steps"], cfg=rc.sampler["cfg"], seed=seed)


def _attention_dump(model, out, layer, entity, n_entities):
    if entity > n_entities:
        raise ValidationError(f"--dump-attn: request has {n_entities} entities (index 0 is the global prompt)")
    amap = model.capture_attention_map(layer=layer, entity_index=entity)
    path = f"{out}.attn_l{layer}_e{entity}.pgm"
    heatmap_export(amap, path, (model.cfg.h, model.cfg.w))
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args):
    rc = load_run_config(args.config)
    model = _load_model(rc)
    req, seed = load_request(args.request, rc.model, args.seed)
    dump = _parse_dump_attn(args.dump_attn, model.cfg.n_double + model.cfg.n_single) if args.dump_attn else None
    model.adapter = _load_adapter(args.adapter, model)
    gr = GenerationRequest(req["global_prompt"], req["entities"], req["negative_prompt"], _sampler_config(rc, seed))
    # attention is captured on the first step, where sigma = 1
    image = generate(gr, model, capture_steps=1 if dump else 0)
    write_ppm(args.out, image)
    meta = {"seed": seed, "config_hash": rc.digest(), "steps": gr.config.steps, "cfg": gr.config.cfg,
            "global_prompt": gr.global_prompt, "entities": [e.prompt for e in gr.entities],
            "adapter": args.adapter, "image": args.out}
    if dump:
        meta["attention_map"] = _attention_dump(model, args.out, *dump, len(gr.entities))
        meta["attention_inmask_fraction"] = [
            attention_inmask_fraction(model.capture_attention_map(dump[0], j + 1),
                                      patchify_mask(e.mask, model.cfg.latent_downsample, model.cfg.patch_size))
            for j, e in enumerate(gr.entities)]
    _write_json(args.out + ".json", meta)
    return 0


def cmd_inpaint(args):
    rc = load_run_config(args.config)
    model = _load_model(rc)
    req, seed = load_request(args.request, rc.model, args.seed)
    try:
        image = read_ppm(args.image)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"--image: {exc}") from exc
    if image.shape != (rc.model.h, rc.model.w, rc.model.channels):
        raise ValidationError(f"--image: expected {rc.model.w}x{rc.model.h} RGB, got {image.shape}")
    model.adapter = _load_adapter(args.adapter, model)
    ir = InpaintRequest(image, req["entities"], req["global_prompt"], req["negative_prompt"], _sampler_config(rc, seed))
    out, info = inpaint(ir, model)
    write_ppm(args.out, out)
    meta = {"seed": seed, "config_hash": rc.digest(), "steps": info["steps"], "cfg": ir.config.cfg,
            "background_drift": info["background_drift"], "entities": [e.prompt for e in ir.entities],
            "adapter": args.adapter, "image": args.out}
    _write_json(args.out + ".json", meta)
    return 0


def _load_training_data(path):
    try:
        data = load_dataset(path)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"--dataset: cannot load {path}: {exc}") from exc
    if not data:
        raise ValidationError(f"--dataset: {path} holds no samples")
    return data


def _loss_writer(path, append):
    f = open(path, "a" if append else "w", newline="")
    w = csv.writer(f)
    if not append:
        w.writerow(["step", "loss"])
    return f, w


def cmd_train(args):
    rc = load_run_config(args.config)
    tc = rc.train if args.steps is None else dataclasses.replace(rc.train, steps=args.steps)
    data = _load_training_data(args.dataset)
    model = _load_model(rc)
    adapter, state, start = None, None, 0
    if args.resume:
        adapter = _load_adapter(args.resume, model)
        start = adapter.header.get("extra", {}).get("step", 0)
        state = adapter.optimizer_state
        if start > tc.steps:
            raise ValidationError(f"--resume checkpoint is at step {start}, beyond --steps {tc.steps}")
    f, w = _loss_writer(args.out + ".loss.csv", append=False)
    try:
        adapter, losses, opt = train(model, data, tc, adapter=adapter, optimizer_state=state, start_step=start,
                                     on_step=lambda s, l: w.writerow([s, repr(l)]))
    finally:
        f.close()
    adapter.save(args.out, extra={"step": tc.steps, "config_hash": rc.digest()}, optimizer=opt)
    return 0


def cmd_pretrain(args):
    rc = load_run_config(args.config)
    tc = rc.train if args.steps is None else dataclasses.replace(rc.train, steps=args.steps)
    data = _load_training_data(args.dataset)
    model = ToyDiT(rc.model)
    f, w = _loss_writer(args.out + ".loss.csv", append=False)
    try:
        pretrain(model, data, tc, on_step=lambda s, l: w.writerow([s, repr(l)]))
    finally:
        f.close()
    model.save(args.out)
    return 0


PROBE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "items": {"type": "integer", "minimum": 1},
        "probe_seed": {"type": "integer", "minimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "dataset": {"type": "string"},
    },
}


def cmd_eval(args):
    """Score layouts; a probe spec with ``dataset`` scores stored images against their own boxes."""
    rc = load_run_config(args.config)
    spec = {} if args.probe is None else _read_json(args.probe, "probe")
    errors = list(jsonschema.Draft7Validator(PROBE_SCHEMA).iter_errors(spec))
    if errors:
        raise ValidationError("\n".join(f"probe: {e.message}" for e in errors))
    if "dataset" in spec:
        data = _load_training_data(spec["dataset"])
        ious = []
        for s in data:
            for e in s.entities:
                box = detect_blob(s.image, PALETTE[e.color]) if e.color in PALETTE else None
                ious.append(0.0 if box is None else iou(box, e.bbox))
        report = EvalReport.from_ious(ious, seed_count=0, extra={"mode": "dataset", "samples": len(data)})
    else:
        model = _load_model(rc)
        adapter = _load_adapter(args.adapter, model)
        seeds = spec.get("seeds", list(range(5)))
        items = make_probe_set(spec.get("items", 50), spec.get("probe_seed", 0), model.cfg)
        mean, table = layout_activation_probe(model, adapter, items, seeds, steps=rc.sampler["steps"],
                                              guidance=rc.sampler["cfg"])
        fractions = _global_inmask_fractions(model, adapter, items[0], seeds[0], rc)
        report = EvalReport.from_ious(table.mean(axis=1), attention_inmask_fraction=fractions,
                                      seed_count=len(seeds),
                                      extra={"mode": "probe", "mean_over_all": mean, "adapter": args.adapter,
                                             "config_hash": rc.digest()})
    with open(args.out, "w") as f:
        f.write(report.to_json() + "\n")
    return 0


def _global_inmask_fractions(model, adapter, item, seed, rc, n_steps=10):
    """In-mask fraction of the global-prompt map over the first sampling steps of one probe item."""
    mask = rect_mask(model.cfg.h, model.cfg.w, item.box)
    token_mask = patchify_mask(mask, model.cfg.latent_downsample, model.cfg.patch_size)
    gr = GenerationRequest(item.prompt, [EntitySpec(item.prompt, mask)], "", _sampler_config(rc, seed))
    out = []

    def grab(i, z, m):
        if i < n_steps:
            out.append(attention_inmask_fraction(m.capture_attention_map(entity_index=0), token_mask))

    saved = model.adapter
    model.adapter = adapter
    try:
        generate(gr, model, on_step=grab, capture_steps=n_steps)
    finally:
        model.adapter = saved
    return out


def cmd_dump_mask(args):
    rc = load_run_config(args.config)
    if rc.paths.get("model") is not None:
        _load_model(rc)
    req, _ = load_request(args.request, rc.model)
    cfg = rc.model
    tok = [patchify_mask(e.mask, cfg.latent_downsample, cfg.patch_size) for e in req["entities"]]
    lengths = [encode_prompt(req["global_prompt"], cfg).length] + [encode_prompt(e.prompt, cfg).length
                                                                   for e in req["entities"]]
    m = compose(tok, cfg.n_p, cfg.n_z,
                lengths if args.pad_masking else None)
    write_pgm(args.out, (m.bits * 255).astype(np.uint8))
    return 0


def cmd_synth(args):
    rc = load_run_config(args.config)
    save_dataset(args.out, synth_dataset(args.n, args.seed, rc.model.h, rc.model.w, rc.model.latent_downsample))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="regionattn", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, request=True, adapter=True):
        sp.add_argument("--config", help="run config JSON (defaults apply when omitted)")
        if request:
            sp.add_argument("--request", required=True, help="request JSON")
            sp.add_argument("--seed", type=int, help="overrides the request seed")
        if adapter:
            sp.add_argument("--adapter", help="adapter checkpoint")
        sp.add_argument("--out", required=True)

    g = sub.add_parser("generate", help="sample an image for a request")
    common(g)
    g.add_argument("--dump-attn", metavar="LAYER:ENTITY", help="write an attention heatmap PGM")
    g.set_defaults(func=cmd_generate)

    ip = sub.add_parser("inpaint", help="regenerate masked regions of an image")
    common(ip)
    ip.add_argument("--image", required=True, help="input PPM")
    ip.set_defaults(func=cmd_inpaint)

    t = sub.add_parser("train", help="fit an adapter on a dataset")
    common(t, request=False, adapter=False)
    t.add_argument("--dataset", required=True)
    t.add_argument("--steps", type=int, help="stop after this global step count")
    t.add_argument("--resume", help="adapter checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    pt = sub.add_parser("pretrain", help="train a base model on global prompts")
    common(pt, request=False, adapter=False)
    pt.add_argument("--dataset", required=True)
    pt.add_argument("--steps", type=int)
    pt.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("eval", help="layout IoU report")
    common(e, request=False)
    e.add_argument("--probe", help="probe spec JSON")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("dump-mask", help="write the composed attention mask as PGM")
    common(d, adapter=False)
    d.add_argument("--pad-masking", action="store_true", help="hide padding tokens outside their own block")
    d.set_defaults(func=cmd_dump_mask)

    s = sub.add_parser("synth", help="write a synthetic dataset directory")
    s.add_argument("--config")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = os.environ.get(THREADS_ENV)
    try:
        if threads is not None:
            try:
                _kernels.set_num_threads(int(threads))
            except ValueError as exc:
                raise ValidationError(f"{THREADS_ENV} must be an integer, got {threads!r}") from exc
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
