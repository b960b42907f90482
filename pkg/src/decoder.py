#!/usr/bin/env python3


#### PYTHON IMPORTS ################################################################################
import sys
from collections import OrderedDict


#### PACKAGE IMPORTS ###############################################################################
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from tqdm import tqdm

from src.checkpoint import loadCheckpoint, loadModulesState, saveModules
from src.denoiser import NonFiniteLossError
from src.embedder import embedMany
from src.grammar import UnknownSymbolError
from src.helpers import checkDim, deriveSeed, numpyGenerator, torchGenerator
from src.layers import RMSNorm, TimeFeatures, TransformerBlock
from src.optim import buildOptimizer, optimizerStep
from src.schedules import alphaSigmaOfLambda, lambdaOf, lambdaOfNoiseVar, scheduleFromConfig


#### GLOBALS #######################################################################################
SPECIAL_SYMBOLS = ["<bos>", "<eos>"]
BOS_ID = 0
EOS_ID = 1
IGNORE_INDEX = -100
TIME_DIM = 64
CHECKPOINT_KIND = "decoder"


#### CLASSES #######################################################################################
class DecoderVocab(object):
    """
    Grammar symbols plus the <bos> and <eos> markers, which take ids 0 and 1.
    """
    def __init__(self, vocabulary):
        self.symbols = SPECIAL_SYMBOLS + list(vocabulary)
        self.index = {symbol: i for i, symbol in enumerate(self.symbols)}


    def __len__(self):
        return len(self.symbols)


    def encode(self, tokens):
        try:
            return [self.index[token] for token in tokens]
        except KeyError as e:
            raise UnknownSymbolError("Symbol {} is not in the decoder vocabulary.".format(e))


    def decode(self, ids):
        return [self.symbols[i] for i in ids]


class PromptGenerator(nn.Module):
    """
    Maps a noisy embedding z (dim d) to k soft tokens of decoder width: a linear map to k * h
    features split into k vectors, then bidirectional transformer blocks whose adaptive
    RMSNorms are driven by sinusoidal features of alpha.
    """
    def __init__(self, dim, width, tokens=8, layers=2, heads=4, time_dim=TIME_DIM):
        super().__init__()
        self.dim = dim
        self.width = width
        self.tokens = tokens
        self.proj = nn.Linear(dim, tokens * width)
        self.token_pos = nn.Parameter(torch.zeros(tokens, width))
        self.time = TimeFeatures(time_dim, width)
        self.blocks = nn.ModuleList([
            TransformerBlock(width, heads, causal=False, cond_dim=width) for _ in range(layers)
        ])
        self.norm = RMSNorm(width)


    def forward(self, z, alpha):
        cond = self.time(alpha)
        h = self.proj(z).view(z.shape[0], self.tokens, self.width) + self.token_pos
        for block in self.blocks:
            h = block(h, cond)
        return self.norm(h)


class ToyDecoder(nn.Module):
    """
    Small causal transformer over [<bos> prefix][soft prompt][continuation].
    """
    def __init__(self, vocab_size, width=128, layers=4, heads=4, max_len=96):
        super().__init__()
        self.vocab_size = vocab_size
        self.width = width
        self.max_len = max_len
        self.tok_emb = nn.Embedding(vocab_size, width)
        self.pos_emb = nn.Embedding(max_len, width)
        self.blocks = nn.ModuleList([
            TransformerBlock(width, heads, causal=True) for _ in range(layers)
        ])
        self.norm = RMSNorm(width)
        self.head = nn.Linear(width, vocab_size, bias=False)


    def forward(self, prefix_ids, soft, cont_ids):
        """
        GIVEN:
          prefix_ids (torch.Tensor) -- (B, P) ids starting with <bos>
          soft (torch.Tensor) -- (B, k, h) soft tokens, or None
          cont_ids (torch.Tensor) -- (B, T) continuation ids, T may be 0

        RETURN:
          ____ (torch.Tensor) -- (B, P + k + T, vocab) next-token logits
        """
        parts = [self.tok_emb(prefix_ids)]
        if soft is not None:
            parts.append(soft)
        if cont_ids.shape[1] > 0:
            parts.append(self.tok_emb(cont_ids))
        h = torch.cat(parts, dim=1)
        length = h.shape[1]
        if length > self.max_len:
            raise ValueError("Sequence of length {} exceeds max_len={}.".format(
                length, self.max_len))
        h = h + self.pos_emb(torch.arange(length, device=h.device))[None]
        for block in self.blocks:
            h = block(h)
        return self.head(self.norm(h))


class DecoderTrainer(object):
    """
    Decoder, prompt generator, their shared AdamW optimizer, the augmentation schedule, and the
    random streams used by decoderTrainStep.
    """
    def __init__(self, decoder, prompt_gen, config, steps=None):
        self.decoder = decoder
        self.prompt_gen = prompt_gen
        self.schedule = scheduleFromConfig(config, "augment")
        self.parameters = list(decoder.parameters())
        if prompt_gen is not None:
            self.parameters += list(prompt_gen.parameters())
        total = config["decoder.steps"] if steps is None else steps
        self.optimizer, self.scheduler = buildOptimizer(
            self.parameters, config["decoder.lr"], config["decoder.weight_decay"],
            config["decoder.beta2"], config["decoder.warmup"], total)
        self.rng = numpyGenerator(deriveSeed(config["train.seed"], 20))
        self.generator = torchGenerator(deriveSeed(config["train.seed"], 21))
        self.warned = False


#### FUNCTIONS #####################################################################################
def lossMask(prefix_len, soft_len, cont_len):
    """
    True at the positions whose next-token prediction is a continuation token or the final
    <eos>: the last soft token (or last prefix token) and every continuation token.
    """
    length = prefix_len + soft_len + cont_len
    mask = torch.zeros(length, dtype=torch.bool)
    mask[prefix_len + soft_len - 1:] = True
    return mask


def streamTargets(prefix_ids, soft_len, cont_ids, eos=True):
    """
    Next-token targets for every position of the input stream. Positions whose next input is
    a soft token have no target. The last position predicts <eos> only when eos is set, so a
    truncated continuation carries no stop target.
    """
    B, P = prefix_ids.shape
    T = cont_ids.shape[1]
    targets = torch.full((B, P + soft_len + T), IGNORE_INDEX, dtype=torch.long)
    targets[:, :P - 1] = prefix_ids[:, 1:]
    targets[:, P + soft_len - 1:P + soft_len - 1 + T] = cont_ids
    targets[:, -1] = EOS_ID if eos else IGNORE_INDEX
    return targets


def continuationLoss(logits, targets, mask):
    """
    Mean cross-entropy over the masked positions only.
    """
    V = logits.shape[-1]
    return F.cross_entropy(logits[:, mask].reshape(-1, V), targets[:, mask].reshape(-1),
                           ignore_index=IGNORE_INDEX)


def decoderLoss(decoder, prompt_gen, prefix_ids, cont_ids, z, alpha, eos=True):
    """
    Next-token continuation loss with the soft prompt built from z at signal scale alpha.
    """
    soft = None if prompt_gen is None else prompt_gen(z, alpha)
    soft_len = 0 if soft is None else soft.shape[1]
    logits = decoder(prefix_ids, soft, cont_ids)
    targets = streamTargets(prefix_ids, soft_len, cont_ids, eos)
    mask = lossMask(prefix_ids.shape[1], soft_len, cont_ids.shape[1])
    return continuationLoss(logits, targets, mask)


def _truncate(trainer, prefix_ids, cont_ids):
    soft_len = 0 if trainer.prompt_gen is None else trainer.prompt_gen.tokens
    room = trainer.decoder.max_len - prefix_ids.shape[1] - soft_len
    if cont_ids.shape[1] > room:
        if not trainer.warned:
            print("WARNING: sequences of length {} exceed max_len={}; truncating continuations "
                  "to {} tokens.".format(prefix_ids.shape[1] + soft_len + cont_ids.shape[1],
                                         trainer.decoder.max_len, room))
            trainer.warned = True
        return cont_ids[:, :max(room, 0)], True
    return cont_ids, False


def decoderTrainStep(trainer, prefix_ids, cont_ids, x_cont):
    """
    One step of decoder + prompt generator training with Gaussian noise augmentation: draw
    t ~ U[0, 1], form z_t = alpha x_cont + sigma eps under the augmentation schedule, build the
    soft prompt from (z_t, alpha), and update both networks on the continuation loss.

    GIVEN:
      trainer (DecoderTrainer) -- networks, optimizer and random streams
      prefix_ids (torch.Tensor) -- (B, P) ids starting with <bos>
      cont_ids (torch.Tensor) -- (B, T) continuation ids
      x_cont (torch.Tensor) -- (B, d) continuation embeddings

    RETURN:
      ____ (float) -- the batch loss
    """
    cont_ids, truncated = _truncate(trainer, prefix_ids, cont_ids)
    dtype = next(trainer.decoder.parameters()).dtype
    batch = prefix_ids.shape[0]

    t = trainer.rng.random(batch)
    alpha, sigma = alphaSigmaOfLambda(lambdaOf(trainer.schedule, t))
    alpha = torch.as_tensor(alpha, dtype=dtype)
    sigma = torch.as_tensor(sigma, dtype=dtype)
    eps = torch.randn(x_cont.shape, generator=trainer.generator, dtype=dtype)
    z = alpha[:, None] * x_cont.to(dtype) + sigma[:, None] * eps

    trainer.decoder.train()
    loss = decoderLoss(trainer.decoder, trainer.prompt_gen, prefix_ids, cont_ids, z, alpha,
                       eos=not truncated)
    if not torch.isfinite(loss):
        raise NonFiniteLossError("Decoder loss is {}.".format(float(loss)))
    loss.backward()
    optimizerStep(trainer.optimizer, trainer.scheduler, trainer.parameters)
    return float(loss)


def encodeRecords(vocab, records):
    """
    Stack corpus records into (N, P) prefix ids (with <bos>) and (N, T) continuation ids. All
    records must share their lengths.
    """
    prefix_lengths = {len(r.prefix) for r in records}
    cont_lengths = {len(r.continuation) for r in records}
    if len(prefix_lengths) != 1 or len(cont_lengths) != 1:
        raise ValueError("Corpus records must share prefix and continuation lengths.")
    prefix_ids = torch.as_tensor([[BOS_ID] + vocab.encode(r.prefix) for r in records])
    cont_ids = torch.as_tensor([vocab.encode(r.continuation) for r in records])
    return prefix_ids, cont_ids


def buildDecoder(config, vocab, dim, prompt_tokens=None):
    """
    Build a fresh decoder and prompt generator. prompt_tokens = 0 gives the prefix-only
    baseline, which has no prompt generator.
    """
    k = config["decoder.prompt_tokens"] if prompt_tokens is None else prompt_tokens
    decoder = ToyDecoder(len(vocab), width=config["decoder.width"],
                         layers=config["decoder.layers"], heads=config["decoder.heads"],
                         max_len=config["decoder.max_len"])
    prompt_gen = None
    if k > 0:
        prompt_gen = PromptGenerator(dim, config["decoder.width"], tokens=k,
                                     layers=config["decoder.prompt_layers"],
                                     heads=config["decoder.heads"])
    return decoder, prompt_gen


def trainDecoder(records, embedder, config, prompt_tokens=None, verbose=True):
    """
    Train the decoder and prompt generator on corpus records.

    GIVEN:
      records (list) -- CorpusRecord tuples
      embedder (Embedder) -- continuation embedder
      config (RunConfig) -- resolved configuration
      prompt_tokens (int) -- override decoder.prompt_tokens (0 for the prefix-only baseline)
      verbose (bool) -- print progress

    RETURN:
      decoder (ToyDecoder) -- the trained decoder
      prompt_gen (PromptGenerator) -- the trained prompt generator, or None for the baseline
      vocab (DecoderVocab) -- the decoder vocabulary
    """
    vocab = DecoderVocab(embedder.vocabulary)
    prefix_ids, cont_ids = encodeRecords(vocab, records)
    x_cont = torch.as_tensor(embedMany(embedder, [r.continuation for r in records]),
                             dtype=torch.float32)

    torch.manual_seed(deriveSeed(config["train.seed"], 22))
    decoder, prompt_gen = buildDecoder(config, vocab, embedder.dim, prompt_tokens)
    trainer = DecoderTrainer(decoder, prompt_gen, config)

    if verbose:
        print("\tTraining decoder on {} records ({} soft tokens)...".format(
            len(records), 0 if prompt_gen is None else prompt_gen.tokens))
    batch_size = config["decoder.batch_size"]
    progress = tqdm(range(config["decoder.steps"]), disable=not verbose)
    for _ in progress:
        idx = torch.as_tensor(trainer.rng.integers(0, len(records), size=batch_size))
        loss = decoderTrainStep(trainer, prefix_ids[idx], cont_ids[idx], x_cont[idx])
        progress.set_postfix(loss="{:.4f}".format(loss))

    decoder.eval()
    if prompt_gen is not None:
        prompt_gen.eval()
    return decoder, prompt_gen, vocab


def softPrompt(prompt_gen, proposal, noise_var, schedule, generator):
    """
    Noise a proposal to sigma^2 = noise_var through the forward process and build its soft
    prompt, (1, k, h).
    """
    dtype = next(prompt_gen.parameters()).dtype
    proposal = torch.as_tensor(proposal, dtype=dtype)
    checkDim("proposal", proposal, prompt_gen.dim)
    alpha, sigma = alphaSigmaOfLambda(lambdaOfNoiseVar(schedule, noise_var))
    eps = torch.randn(proposal.shape, generator=generator, dtype=dtype)
    z = alpha * proposal + sigma * eps
    return prompt_gen(z[None], torch.full((1,), alpha, dtype=dtype))


def generate(decoder, prompt_gen, vocab, prefix, proposal, generator, schedule, noise_var=0.05,
             max_tokens=32):
    """
    Ancestral sampling (temperature 1) of a continuation steered by a semantic proposal. Stops
    at <eos> or after max_tokens; the first token is never <eos>.

    GIVEN:
      decoder (ToyDecoder) -- the decoder
      prompt_gen (PromptGenerator) -- prompt generator, or None for the baseline
      vocab (DecoderVocab) -- decoder vocabulary
      prefix (list) -- prefix symbols
      proposal (np.ndarray) -- (d,) proposal embedding, ignored by the baseline
      generator (torch.Generator) -- random stream
      schedule (Schedule) -- augmentation schedule (supplies the clamp bounds)
      noise_var (float) -- sigma^2 of the proposal noise
      max_tokens (int) -- continuation length cap

    RETURN:
      ____ (list) -- generated symbols
    """
    decoder.eval()
    prefix_ids = torch.as_tensor([[BOS_ID] + vocab.encode(prefix)])
    out = list()
    with torch.no_grad():
        soft = None
        if prompt_gen is not None:
            prompt_gen.eval()
            soft = softPrompt(prompt_gen, proposal, noise_var, schedule, generator)
        used = prefix_ids.shape[1] + (0 if soft is None else soft.shape[1])

        while len(out) < max_tokens:
            if used + len(out) >= decoder.max_len:
                print("WARNING: generation reached max_len={}; stopping at {} tokens.".format(
                    decoder.max_len, len(out)))
                break
            cont_ids = torch.as_tensor([out], dtype=torch.long).reshape(1, len(out))
            logits = decoder(prefix_ids, soft, cont_ids)[0, -1].double()
            logits[BOS_ID] = float("-inf")
            if len(out) == 0:
                logits[EOS_ID] = float("-inf")
            token = int(torch.multinomial(torch.softmax(logits, dim=-1), 1, generator=generator))
            if token == EOS_ID:
                break
            out.append(token)

    return vocab.decode(out)


def saveDecoder(filepath, decoder, prompt_gen, vocab, config):
    """
    Save the decoder and prompt generator together with the architecture and vocabulary.
    """
    modules = OrderedDict([("decoder", decoder)])
    if prompt_gen is not None:
        modules["prompt"] = prompt_gen
    saveModules(filepath, modules, {
        "kind": CHECKPOINT_KIND, "vocabulary": vocab.symbols[len(SPECIAL_SYMBOLS):],
        "width": decoder.width, "layers": config["decoder.layers"],
        "heads": config["decoder.heads"], "max_len": decoder.max_len,
        "prompt_tokens": 0 if prompt_gen is None else prompt_gen.tokens,
        "prompt_layers": config["decoder.prompt_layers"],
        "dim": 0 if prompt_gen is None else prompt_gen.dim,
    })


def loadDecoder(filepath):
    """
    Load a decoder checkpoint.

    RETURN:
      decoder (ToyDecoder) -- the decoder
      prompt_gen (PromptGenerator) -- the prompt generator, or None
      vocab (DecoderVocab) -- the decoder vocabulary
    """
    _, meta = loadCheckpoint(filepath)
    vocab = DecoderVocab(meta["vocabulary"])
    decoder = ToyDecoder(len(vocab), width=meta["width"], layers=meta["layers"],
                         heads=meta["heads"], max_len=meta["max_len"])
    modules = OrderedDict([("decoder", decoder)])
    prompt_gen = None
    if meta["prompt_tokens"] > 0:
        prompt_gen = PromptGenerator(meta["dim"], meta["width"], tokens=meta["prompt_tokens"],
                                     layers=meta["prompt_layers"], heads=meta["heads"])
        modules["prompt"] = prompt_gen
    loadModulesState(filepath, modules)
    decoder.eval()
    if prompt_gen is not None:
        prompt_gen.eval()
    return decoder, prompt_gen, vocab


def firstTokenCounts(decoder, prompt_gen, vocab, prefix, proposal, generator, schedule,
                     noise_var, draws):
    """
    Histogram of the first generated token over repeated draws, indexed by decoder id. Draws
    that stop at <eos> before any token are not counted.
    """
    counts = np.zeros(len(vocab), dtype=np.int64)
    for _ in range(draws):
        token = generate(decoder, prompt_gen, vocab, prefix, proposal, generator, schedule,
                         noise_var, max_tokens=1)
        if len(token) == 0:
            continue
        counts[vocab.index[token[0]]] += 1
    return counts


#### MAIN ##########################################################################################
if __name__ == "__main__": # pragma: no cover
    sys.exit("This file is not intended to be run independently. Please execute './main.py' to "
             "access this functionality.")
