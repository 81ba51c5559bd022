"""Independent closed-form byte counts, written from the message schedule alone."""

FLOAT = 4
SCALAR = 8
BANK_HEADER = 12
TAG = 8


def encoder_size(input_dim, hidden=64, d_feat=32):
    return input_dim * hidden + hidden + hidden * d_feat + d_feat


def predictor_size(d_feat=32, hidden=32):
    return d_feat * hidden + hidden + hidden * d_feat + d_feat


def expected_components(variant, P_e, P_p, n_clients, rounds, K=64, d_feat=32, R_cal=10):
    """Bytes per (direction, component) for full participation, summed over all rounds."""
    C, R = n_clients, rounds
    enc, pred = FLOAT * P_e, FLOAT * P_p
    bank = BANK_HEADER + K * (TAG + FLOAT * d_feat)
    out = {}
    if variant in ("fedmoco", "fcl"):
        out[("down", "online_net")] = R * C * enc
        out[("down", "target_net")] = R * C * enc
        out[("up", "online_net")] = R * C * enc
        out[("up", "target_net")] = R * C * enc
        if variant == "fcl":
            out[("up", "features")] = R * C * bank
            out[("down", "features")] = R * C * (C - 1) * bank
        return out
    out[("down", "online_net")] = R * C * enc
    out[("down", "predictor")] = R * C * pred
    out[("up", "online_net")] = R * C * enc
    out[("up", "predictor")] = R * C * pred
    if variant == "fclopt":
        out[("down", "target_net")] = R * C * enc
        out[("up", "target_net")] = R * C * enc
    elif variant == "fclopt-ptnu":
        out[("down", "scalar")] = R * C * SCALAR
        out[("up", "target_net")] = R * C * enc
    elif variant == "fclopt-ptnu-dp":
        out[("up", "scalar")] = R * C * SCALAR
        out[("down", "scalar")] = R * C * SCALAR
        out[("up", "target_net")] = (R // R_cal) * C * enc
    return out


def expected_total(*args, **kwargs):
    return sum(expected_components(*args, **kwargs).values())
