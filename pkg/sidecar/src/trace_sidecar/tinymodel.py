"""Materialize a tiny randomly-initialized causal LM for offline smoke runs.

The tokenizer is byte-level over the ASCII range with no merges: every byte
is one token, so any ASCII prompt round-trips exactly and the vocabulary
stays at 129 entries (128 bytes + end-of-text). Weights are random but
seeded, which is all the serving contract needs (greedy decoding is then
fully deterministic).
"""
from __future__ import annotations

import argparse

import torch
from tokenizers import Tokenizer, decoders, models, pre_tokenizers
from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

EOS_TOKEN = "<|endoftext|>"


def bytes_to_unicode_map() -> dict[int, str]:
    """The byte-to-printable-unicode mapping used by byte-level BPE."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("\xa1"), ord("\xac") + 1)) + list(
        range(ord("\xae"), ord("\xff") + 1)
    )
    cs = bs[:]
    n = 0
    for b in range(2**8):
        if b not in bs:
            bs.append(b)
            cs.append(2**8 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


def build_ascii_tokenizer() -> PreTrainedTokenizerFast:
    mapping = bytes_to_unicode_map()
    vocab = {mapping[b]: b for b in range(128)}  # token id == byte value
    vocab[EOS_TOKEN] = 128
    tok = Tokenizer(models.BPE(vocab=vocab, merges=[]))
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False, use_regex=True)
    tok.decoder = decoders.ByteLevel()
    return PreTrainedTokenizerFast(
        tokenizer_object=tok,
        eos_token=EOS_TOKEN,
        bos_token=EOS_TOKEN,
        model_max_length=1_000_000,
    )


def build_tiny_model(
    out_dir: str,
    seed: int = 7,
    n_layer: int = 2,
    n_head: int = 2,
    n_embd: int = 64,
    n_positions: int = 4096,
) -> None:
    tokenizer = build_ascii_tokenizer()
    config = GPT2Config(
        vocab_size=129,
        n_layer=n_layer,
        n_head=n_head,
        n_embd=n_embd,
        n_positions=n_positions,
        bos_token_id=128,
        eos_token_id=128,
    )
    torch.manual_seed(seed)
    model = GPT2LMHeadModel(config)
    model.save_pretrained(out_dir)
    tokenizer.save_pretrained(out_dir)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="make-tiny-model", description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--heads", type=int, default=2)
    parser.add_argument("--width", type=int, default=64)
    parser.add_argument("--positions", type=int, default=4096)
    args = parser.parse_args(argv)
    build_tiny_model(args.out, args.seed, args.layers, args.heads, args.width, args.positions)
    print(f"wrote tiny causal LM to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
