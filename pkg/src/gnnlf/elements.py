"""Element symbols and standard atomic weights (H through Kr)."""

SYMBOLS = (
    "X H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca "
    "Sc Ti V Cr Mn Fe Co Ni Cu Zn Ga Ge As Se Br Kr"
).split()

# g/mol, conventional values
MASSES = {
    1: 1.008, 2: 4.0026, 3: 6.94, 4: 9.0122, 5: 10.81, 6: 12.011, 7: 14.007,
    8: 15.999, 9: 18.998, 10: 20.180, 11: 22.990, 12: 24.305, 13: 26.982,
    14: 28.085, 15: 30.974, 16: 32.06, 17: 35.45, 18: 39.948, 19: 39.098,
    20: 40.078, 21: 44.956, 22: 47.867, 23: 50.942, 24: 51.996, 25: 54.938,
    26: 55.845, 27: 58.933, 28: 58.693, 29: 63.546, 30: 65.38, 31: 69.723,
    32: 72.630, 33: 74.922, 34: 78.971, 35: 79.904, 36: 83.798,
}  # fmt: skip

_NUMBERS = {sym: z for z, sym in enumerate(SYMBOLS) if z > 0}


def atomic_number(symbol: str) -> int:
    try:
        return _NUMBERS[symbol.capitalize()]
    except KeyError:
        raise KeyError(f"unknown element symbol {symbol!r}") from None


def symbol(z: int) -> str:
    if not 0 < z < len(SYMBOLS):
        raise KeyError(f"no symbol for atomic number {z}")
    return SYMBOLS[z]


def mass(z: int) -> float:
    try:
        return MASSES[int(z)]
    except KeyError:
        raise KeyError(f"no atomic mass for atomic number {z}") from None
