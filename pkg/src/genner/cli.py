"""Command line interface.

Every command is a thin client of the HTTP service: by default it mounts the
app in-process (no socket involved), with --server it talks to a running
instance instead. Results go to stdout, progress and errors to stderr;
failures exit nonzero after one machine-readable JSON error line.
"""

from __future__ import annotations

import asyncio
import json
import sys
from pathlib import Path

import click
import httpx

from .diagnostics import format_report


def _fail(message: str) -> None:
    print(json.dumps({"error": message}), file=sys.stderr)
    sys.exit(1)


def _call(server: str | None, path: str, payload: dict) -> dict:
    if server:
        try:
            with httpx.Client(base_url=server, timeout=None) as client:
                resp = client.post(path, json=payload)
        except httpx.HTTPError as exc:
            _fail(f"cannot reach {server}: {exc}")
    else:
        from .service import create_app
        transport = httpx.ASGITransport(app=create_app())

        async def go():
            async with httpx.AsyncClient(transport=transport,
                                         base_url="http://service",
                                         timeout=None) as client:
                return await client.post(path, json=payload)

        resp = asyncio.run(go())
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        _fail(str(detail))
    return resp.json()


def _server_option(f):
    return click.option("--server", default=None, metavar="URL",
                        help="send the request to a running service instead "
                             "of handling it in-process")(f)


@click.group()
def main() -> None:
    """Multimodal sequence tagger: data generation, training, evaluation,
    inference, and model inspection."""


@main.command("gen-data")
@click.option("--out", required=True, help="directory for the dataset files")
@click.option("--config", default=None, help="INI file with a [data] section")
@click.option("--seed", type=int, default=None, help="override the data seed")
@_server_option
def gen_data(out: str, config: str | None, seed: int | None,
             server: str | None) -> None:
    """Generate a synthetic paired corpus."""
    resp = _call(server, "/data/generate",
                 {"out_dir": out, "config": config, "seed": seed})
    print(json.dumps(resp, indent=2))


@main.command()
@click.option("--data", required=True, help="dataset directory (from gen-data)")
@click.option("--out", required=True, help="directory for checkpoints and history")
@click.option("--config", default=None, help="INI file with [model]/[train] sections")
@click.option("--seed", type=int, default=None, help="override the training seed")
@_server_option
def train(data: str, out: str, config: str | None, seed: int | None,
          server: str | None) -> None:
    """Train a tagger on a generated dataset."""
    resp = _call(server, "/train", {"data_dir": data, "out_dir": out,
                                    "config": config, "seed": seed})
    for entry in resp["history"]:
        print(f"epoch {entry['epoch']}: train loss {entry['train_loss']:.4f}, "
              f"dev f1 {entry['dev']['overall']['f1']:.4f}", file=sys.stderr)
    summary = {k: resp[k] for k in
               ("best_epoch", "best_dev_f1", "total_steps", "checkpoints")}
    print(json.dumps(summary, indent=2))


@main.command("eval")
@click.option("--checkpoint", required=True, help="checkpoint file")
@click.option("--data", required=True, help="dataset directory")
@click.option("--split", default="test", show_default=True)
@_server_option
def eval_cmd(checkpoint: str, data: str, split: str, server: str | None) -> None:
    """Span micro metrics of a checkpoint on one split."""
    resp = _call(server, "/eval", {"checkpoint": checkpoint,
                                   "data_dir": data, "split": split})
    print(json.dumps(resp, indent=2))


@main.command()
@click.option("--checkpoint", required=True, help="checkpoint file")
@click.argument("text_file")
@_server_option
def infer(checkpoint: str, text_file: str, server: str | None) -> None:
    """Tag sentences from a file, one whitespace-tokenized sentence per line.

    Output is one token\\tlabel block per sentence, blocks separated by
    blank lines."""
    path = Path(text_file)
    if not path.exists():
        _fail(f"no such file: {text_file}")
    sentences = [line.split() for line in path.read_text().splitlines()
                 if line.strip()]
    if not sentences:
        _fail(f"{text_file} contains no sentences")
    resp = _call(server, "/infer", {"checkpoint": checkpoint,
                                    "sentences": sentences})
    blocks = ["\n".join(f"{t}\t{lab}" for t, lab in zip(s["tokens"], s["labels"]))
              for s in resp["sentences"]]
    print("\n\n".join(blocks))


@main.command("inspect-masks")
@click.option("--checkpoint", required=True, help="checkpoint file")
@click.option("--data", required=True, help="dataset directory")
@click.option("--split", default="test", show_default=True)
@click.option("--index", type=int, default=0, show_default=True,
              help="example index within the split")
@_server_option
def inspect_masks(checkpoint: str, data: str, split: str, index: int,
                  server: str | None) -> None:
    """Per-layer keep/drop decisions for one example's tokens and patches.

    Kept positions print with a ``+`` prefix, dropped ones with ``-``."""
    resp = _call(server, "/inspect/masks",
                 {"checkpoint": checkpoint, "data_dir": data,
                  "split": split, "index": index})
    image = "yes" if resp["has_image"] else "no"
    print(f"example {resp['index']} ({split}), image: {image}")
    words = resp["tokens"][1:-1]
    print("tags:   " + " ".join(f"{w}/{t}" for w, t in zip(words, resp["tags"])))
    for i, layer in enumerate(resp["layers"]):
        marks = " ".join(("+" if k else "-") + tok
                         for tok, k in zip(resp["tokens"], layer["text_keep"]))
        print(f"layer {i} tokens:  {marks}")
        if layer.get("patch_keep") is not None:
            slots = " ".join(("+" if k else "-") + str(j)
                             for j, k in enumerate(layer["patch_keep"]))
            print(f"layer {i} patches: {slots}")


@main.command("align-sim")
@click.option("--checkpoint", required=True, help="checkpoint file")
@click.option("--data", required=True, help="dataset directory")
@click.option("--split", default="test", show_default=True)
@click.option("--index", type=int, default=0, show_default=True,
              help="example index within the split")
@click.option("--k", type=int, default=3, show_default=True,
              help="number of mismatched images")
@click.option("--seed", type=int, default=0, show_default=True,
              help="seed for drawing the mismatched images")
@_server_option
def align_sim(checkpoint: str, data: str, split: str, index: int, k: int,
              seed: int, server: str | None) -> None:
    """Similarity of the generated visual features to the paired image
    versus mismatched ones."""
    resp = _call(server, "/inspect/similarity",
                 {"checkpoint": checkpoint, "data_dir": data, "split": split,
                  "index": index, "k": k, "seed": seed})
    print(f"example {resp['index']} ({split}): {' '.join(resp['tokens'])}")
    print(f"  paired      {resp['paired_score']:+.4f}")
    for m in resp["mismatched"]:
        print(f"  mismatched  {m['score']:+.4f}  (example {m['index']})")
    print(f"paired image preferred: {'yes' if resp['preferred'] else 'no'}")


@main.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--trials", type=int, default=10, show_default=True,
              help="random inputs per operation")
@_server_option
def gradcheck(seed: int, trials: int, server: str | None) -> None:
    """Finite-difference verification of every gradient path."""
    resp = _call(server, "/gradcheck", {"seed": seed, "trials": trials})
    print(format_report(resp))
    if not resp["ok"]:
        sys.exit(1)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
