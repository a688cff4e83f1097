from dataclasses import dataclass


@dataclass(frozen=True)
class TokenIdentifiers:
    DIGIT_FIRST: int = 0
    DIGIT_LAST: int = 9
    DELIMITER: int = 10
    EOS: int = 11
    PAD: int = 12
    SYMBOL_FIRST: int = 13


@dataclass(frozen=True)
class LayerIdentifiers:
    W_Q: str = "W_Q"
    W_K: str = "W_K"
    W_V: str = "W_V"
    W_O: str = "W_O"
    W_GATE: str = "W_gate"
    W_UP: str = "W_up"
    W_DOWN: str = "W_down"
    RMSNORM_ATTN: str = "rmsnorm_attn_w"
    RMSNORM_FFN: str = "rmsnorm_ffn_w"
    TOKEN_EMBEDDING: str = "token_embedding"
    POSITION_EMBEDDING: str = "position_embedding"
    FINAL_RMSNORM: str = "final_rmsnorm_w"
    LM_HEAD: str = "W_lm"


@dataclass(frozen=True)
class ComponentIdentifiers:
    LM_HEAD: str = "lm_head"
    ATTN: str = "attn"
    MLP: str = "mlp"


@dataclass(frozen=True)
class CheckIdentifiers:
    PROPOSITION1: str = "proposition1"
    LEMMA1_LOWER: str = "lemma1_lower"
    LEMMA1_UPPER: str = "lemma1_upper"
    THEOREM1: str = "theorem1"
    LEMMA2: str = "lemma2"
    THEOREM2: str = "theorem2"
    CHI2_IDENTITY: str = "chi2_identity"


@dataclass(frozen=True)
class CommandIdentifiers:
    TRAIN: str = "train"
    MEASURE: str = "measure"
    VERIFY: str = "verify"
    REPORT: str = "report"


# intermediate linear layers bounded by the activation lemma, in block order
INTERMEDIATE_LAYERS = (
    LayerIdentifiers.W_Q,
    LayerIdentifiers.W_K,
    LayerIdentifiers.W_V,
    LayerIdentifiers.W_O,
    LayerIdentifiers.W_GATE,
    LayerIdentifiers.W_UP,
    LayerIdentifiers.W_DOWN,
)

ATTN_LAYERS = INTERMEDIATE_LAYERS[:4]
MLP_LAYERS = INTERMEDIATE_LAYERS[4:]


def block_weight_name(block: int, layer: str) -> str:
    return f"blocks.{block}.{layer}"


def split_weight_name(name: str) -> tuple[int | None, str]:
    """'blocks.1.W_up' -> (1, 'W_up'); 'W_lm' -> (None, 'W_lm')."""
    if name.startswith("blocks."):
        _, block, layer = name.split(".", 2)
        return int(block), layer
    return None, name
