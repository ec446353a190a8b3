"""Deterministic synthetic text used when no corpus file is configured."""
from core.libs import assertions, helpers

SUBJECTS = ['the cat', 'a dog', 'the old man', 'my sister', 'the farmer', 'a small bird', 'the robot',
            'our neighbour', 'the farmer', 'a child']
VERBS = ['sees', 'likes', 'follows', 'finds', 'carries', 'paints', 'watches', 'builds', 'opens', 'hears']
OBJECTS = ['the red ball', 'a wooden box', 'the river', 'an apple', 'the green door', 'a long letter',
           'the bright moon', 'a heavy stone', 'the garden', 'a blue kite']
PLACES = ['in the morning', 'near the house', 'after school', 'at night', 'by the lake', 'on the hill']


def synthesize_corpus(n_sentences, seed=0):
    """Sentences from a small fixed grammar; same seed, same text."""
    assertions.assert_config(n_sentences > 0, 'synthetic corpus needs at least one sentence')
    rng = helpers.new_rng(seed, 1)
    lines = []
    for _ in range(n_sentences):
        words = [SUBJECTS[rng.integers(len(SUBJECTS))], VERBS[rng.integers(len(VERBS))],
                 OBJECTS[rng.integers(len(OBJECTS))]]
        if rng.random() < 0.5:
            words.append(PLACES[rng.integers(len(PLACES))])
        lines.append(' '.join(words) + '.')
    return '\n'.join(lines) + '\n'
