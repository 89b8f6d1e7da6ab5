"""Element symbol <-> atomic number lookup (Z = 1..103)."""

from .errors import UnknownElement

SYMBOLS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni "
    "Cu Zn Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe "
    "Cs Ba La Ce Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg "
    "Tl Pb Bi Po At Rn Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr"
).split()

MAX_Z = len(SYMBOLS)
_Z_OF = {s: z for z, s in enumerate(SYMBOLS, start=1)}


def atomic_number(symbol: str) -> int:
    try:
        return _Z_OF[symbol.strip()]
    except KeyError:
        raise UnknownElement(symbol) from None


def symbol(z: int) -> str:
    if not 1 <= z <= MAX_Z:
        raise UnknownElement(str(z))
    return SYMBOLS[z - 1]
