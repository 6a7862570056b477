from hypothesis import settings

# fixed example streams so reruns print the same results
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")


def small_dataset(n=40, seed=0, **model_overrides):
    """Encoded synthetic sessions plus a small model config sized for them."""
    from mmcsg.corpus import SynthSpec, generate_corpus, split
    from mmcsg.features import VocabSpec
    from mmcsg.model import ModelConfig

    corpus = generate_corpus(SynthSpec(n_sessions=n, seed=seed, d_audio=4, d_visual=3,
                                       min_filler=3, max_filler=5))
    vocab = VocabSpec.build(t for b in corpus for t in (b.transcript, b.mcs, b.doctor_summary))
    for b in corpus:
        b.encode(vocab)
    base = dict(vocab_size=len(vocab), d_model=8, n_heads=2, n_encoder_layers=1,
                n_decoder_layers=1, d_ff=16, d_audio=4, d_visual=3, seed=seed)
    base.update(model_overrides)
    train_set, val_set, test_set = split(corpus, seed=seed)
    return ModelConfig(**base), train_set, val_set, test_set, vocab


# criterion number -> PASS/FAIL line, filled by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
