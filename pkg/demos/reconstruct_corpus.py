"""Turn clean reasoning traces into diagnose-then-correct training samples.

Each sample gets one critical step rewritten into a failure, followed by the
level's trigger token and a short prompt, diagnosis and correction. The loss
mask covers everything in the output except the trigger, which is only ever
inserted by the monitor at inference time.

    python3 demos/reconstruct_corpus.py
"""
from neuromon.reconstruct import ReconstructConfig, RuleRewriter, reconstruct_corpus, synthetic_samples

raw = synthetic_samples(200, seed=7)
corpus, report = reconstruct_corpus(raw, RuleRewriter(), ReconstructConfig(seed=7))
print("report:", report.to_dict(), "\n")

sample = next(s for s in corpus if s.level.value == "intra")
print(f"sample {sample.sample_id}: step {sample.j} rewritten with rule {sample.rule!r}")
print(f"input: {sample.input}\n")
for seg in sample.segments:
    text = sample.output[seg.start:seg.end].replace("\n", " / ")
    masked = any(a <= seg.start and seg.end <= b for a, b in sample.mask)
    print(f"  {seg.role:>10} {'loss' if masked else '----'}  {text[:90]}")

original = raw[int(sample.sample_id.split(":")[0][1:])].steps[sample.j - 1]
print(f"\noriginal step {sample.j}: {original}")
