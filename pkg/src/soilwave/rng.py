"""Seeded random streams.

Every random draw in the package comes from numpy's ``PCG64`` bit generator
(PCG-XSL-RR 128/64) keyed by a ``SeedSequence``. Independent streams are
obtained by ``spawn_key``, so the stream for gateway 2 does not depend on how
many values gateway 1 consumed. PCG64 output and ``SeedSequence`` hashing are
fixed by numpy's stream-compatibility policy and are platform independent.

Stream keys used by the package:

=====================  =====================================
``(0,)``               humidity rain events
``(1, g, 0)``          RSSI noise of gateway index ``g``
``(1, g, 1)``          SNR noise of gateway index ``g``
``(2, 0)``             LSTM weight initialisation
``(2, 1)``             LSTM batch shuffling
``(2, 2)``             LSTM dropout masks
``(3,)``               SVR working-set tie ordering
=====================  =====================================
"""

from __future__ import annotations

import numpy as np

HUMIDITY = (0,)
LSTM_INIT = (2, 0)
LSTM_SHUFFLE = (2, 1)
LSTM_DROPOUT = (2, 2)
SVR_ORDER = (3,)

_MASK64 = (1 << 64) - 1


def gateway_stream(index: int, which: int) -> tuple[int, ...]:
    return (1, index, which)


def stream(seed: int, key: tuple[int, ...] = ()) -> np.random.Generator:
    """Generator for the stream ``key`` under the root ``seed``."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=tuple(key))
    return np.random.Generator(np.random.PCG64(ss))


def derive_seed(seed: int, index: int) -> int:
    """A 64-bit child seed for row ``index`` of a sweep."""
    ss = np.random.SeedSequence(int(seed) & _MASK64, spawn_key=(4, int(index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
