"""Scalar compute kernels for splat projection, compositing, and gradients.

Everything here is written as plain per-element loops so results do not depend
on how work is sliced across workers: the same inputs produce the same bits
whether a Gaussian sits in a full array or a shard. All internal arithmetic is
float64; callers choose storage dtypes. Kernels release the GIL so worker
threads overlap.
"""

from __future__ import annotations

import numpy as np
from numba import njit

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199

NEAR_PLANE = 0.01
COV_DILATION = 0.3
ALPHA_CLAMP = 0.99
ALPHA_SKIP = 1.0 / 255.0
T_STOP = 1e-4


@njit(cache=True, nogil=True)
def _project_core(px, py, pz, lsx, lsy, lsz, qw, qx, qy, qz, logit, sh, degree,
                  rot, t0, t1, t2, ccx, ccy, ccz, fx, fy, cx, cy):
    """Project one Gaussian. Returns every intermediate the backward chain needs.

    Tuple layout:
      0 valid, 1..3 camera-space mean, 4..5 mean2d, 6..9 cov2d (a,b,c,det),
      10..12 conic, 13 radius, 14 opacity, 15..17 clamped rgb, 18..20 pre-clamp
      rgb, 21..24 view dir + length, 25..29 normalized quat + raw norm,
      30..32 squared scales, 33..41 rotation matrix rows, 42..47 U = J @ rot.
    """
    zero = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    qcx = rot[0, 0] * px + rot[0, 1] * py + rot[0, 2] * pz + t0
    qcy = rot[1, 0] * px + rot[1, 1] * py + rot[1, 2] * pz + t1
    qcz = rot[2, 0] * px + rot[2, 1] * py + rot[2, 2] * pz + t2
    if qcz <= NEAR_PLANE:
        return (False,) + zero[1:]
    qnorm = np.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    if qnorm < 1e-12:
        return (False,) + zero[1:]
    nqw = qw / qnorm
    nqx = qx / qnorm
    nqy = qy / qnorm
    nqz = qz / qnorm
    r00 = 1.0 - 2.0 * (nqy * nqy + nqz * nqz)
    r01 = 2.0 * (nqx * nqy - nqw * nqz)
    r02 = 2.0 * (nqx * nqz + nqw * nqy)
    r10 = 2.0 * (nqx * nqy + nqw * nqz)
    r11 = 1.0 - 2.0 * (nqx * nqx + nqz * nqz)
    r12 = 2.0 * (nqy * nqz - nqw * nqx)
    r20 = 2.0 * (nqx * nqz - nqw * nqy)
    r21 = 2.0 * (nqy * nqz + nqw * nqx)
    r22 = 1.0 - 2.0 * (nqx * nqx + nqy * nqy)
    s20 = np.exp(2.0 * lsx)
    s21 = np.exp(2.0 * lsy)
    s22 = np.exp(2.0 * lsz)
    # World covariance R diag(s^2) R^T.
    c3_00 = r00 * s20 * r00 + r01 * s21 * r01 + r02 * s22 * r02
    c3_01 = r00 * s20 * r10 + r01 * s21 * r11 + r02 * s22 * r12
    c3_02 = r00 * s20 * r20 + r01 * s21 * r21 + r02 * s22 * r22
    c3_11 = r10 * s20 * r10 + r11 * s21 * r11 + r12 * s22 * r12
    c3_12 = r10 * s20 * r20 + r11 * s21 * r21 + r12 * s22 * r22
    c3_22 = r20 * s20 * r20 + r21 * s21 * r21 + r22 * s22 * r22
    iz = 1.0 / qcz
    iz2 = iz * iz
    j00 = fx * iz
    j02 = -fx * qcx * iz2
    j11 = fy * iz
    j12 = -fy * qcy * iz2
    # U = J @ rot, rows of the 2x3 screen Jacobian in world coordinates.
    u00 = j00 * rot[0, 0] + j02 * rot[2, 0]
    u01 = j00 * rot[0, 1] + j02 * rot[2, 1]
    u02 = j00 * rot[0, 2] + j02 * rot[2, 2]
    u10 = j11 * rot[1, 0] + j12 * rot[2, 0]
    u11 = j11 * rot[1, 1] + j12 * rot[2, 1]
    u12 = j11 * rot[1, 2] + j12 * rot[2, 2]
    # cov2d = U Sigma U^T + dilation.
    w00 = u00 * c3_00 + u01 * c3_01 + u02 * c3_02
    w01 = u00 * c3_01 + u01 * c3_11 + u02 * c3_12
    w02 = u00 * c3_02 + u01 * c3_12 + u02 * c3_22
    w10 = u10 * c3_00 + u11 * c3_01 + u12 * c3_02
    w11 = u10 * c3_01 + u11 * c3_11 + u12 * c3_12
    w12 = u10 * c3_02 + u11 * c3_12 + u12 * c3_22
    cov_a = w00 * u00 + w01 * u01 + w02 * u02 + COV_DILATION
    cov_b = w00 * u10 + w01 * u11 + w02 * u12
    cov_c = w10 * u10 + w11 * u11 + w12 * u12 + COV_DILATION
    det = cov_a * cov_c - cov_b * cov_b
    if det <= 0.0:
        return (False,) + zero[1:]
    con_a = cov_c / det
    con_b = -cov_b / det
    con_c = cov_a / det
    mid = 0.5 * (cov_a + cov_c)
    disc = mid * mid - det
    if disc < 0.0:
        disc = 0.0
    lam_max = mid + np.sqrt(disc)
    radius = 3.0 * np.sqrt(lam_max)
    u = fx * qcx * iz + cx
    v = fy * qcy * iz + cy
    opac = 1.0 / (1.0 + np.exp(-logit))
    vx = px - ccx
    vy = py - ccy
    vz = pz - ccz
    vlen = np.sqrt(vx * vx + vy * vy + vz * vz)
    if vlen < 1e-12:
        return (False,) + zero[1:]
    dirx = vx / vlen
    diry = vy / vlen
    dirz = vz / vlen
    pre_r = 0.5 + SH_C0 * sh[0, 0]
    pre_g = 0.5 + SH_C0 * sh[0, 1]
    pre_b = 0.5 + SH_C0 * sh[0, 2]
    if degree >= 1:
        pre_r = pre_r + (-SH_C1) * diry * sh[1, 0]
        pre_g = pre_g + (-SH_C1) * diry * sh[1, 1]
        pre_b = pre_b + (-SH_C1) * diry * sh[1, 2]
        pre_r = pre_r + SH_C1 * dirz * sh[2, 0]
        pre_g = pre_g + SH_C1 * dirz * sh[2, 1]
        pre_b = pre_b + SH_C1 * dirz * sh[2, 2]
        pre_r = pre_r + (-SH_C1) * dirx * sh[3, 0]
        pre_g = pre_g + (-SH_C1) * dirx * sh[3, 1]
        pre_b = pre_b + (-SH_C1) * dirx * sh[3, 2]
    col_r = min(max(pre_r, 0.0), 1.0)
    col_g = min(max(pre_g, 0.0), 1.0)
    col_b = min(max(pre_b, 0.0), 1.0)
    return (True, qcx, qcy, qcz, u, v, cov_a, cov_b, cov_c, det,
            con_a, con_b, con_c, radius, opac, col_r, col_g, col_b,
            pre_r, pre_g, pre_b, dirx, diry, dirz, vlen,
            nqw, nqx, nqy, nqz, qnorm, s20, s21, s22,
            r00, r01, r02, r10, r11, r12, r20, r21, r22,
            u00, u01, u02, u10, u11, u12)


@njit(cache=True, nogil=True)
def _project_kernel(positions, log_scales, rotations, logits, sh, degree,
                    rot, trans, cam_center, fx, fy, cx, cy,
                    width, height, tile_size, tiles_x, tiles_y,
                    out_flag, out_mean2d, out_cov2d, out_conic, out_depth,
                    out_color, out_opacity, out_tiles):
    n = positions.shape[0]
    for i in range(n):
        res = _project_core(
            positions[i, 0], positions[i, 1], positions[i, 2],
            log_scales[i, 0], log_scales[i, 1], log_scales[i, 2],
            rotations[i, 0], rotations[i, 1], rotations[i, 2], rotations[i, 3],
            logits[i], sh[i], degree,
            rot, trans[0], trans[1], trans[2],
            cam_center[0], cam_center[1], cam_center[2], fx, fy, cx, cy)
        out_flag[i] = 0
        if not res[0]:
            continue
        u = res[4]
        v = res[5]
        radius = res[13]
        if (u + radius < 0.0 or u - radius > width - 1.0
                or v + radius < 0.0 or v - radius > height - 1.0):
            continue
        tx0 = int(np.floor((u - radius) / tile_size))
        tx1 = int(np.floor((u + radius) / tile_size))
        ty0 = int(np.floor((v - radius) / tile_size))
        ty1 = int(np.floor((v + radius) / tile_size))
        if tx1 < 0 or ty1 < 0 or tx0 >= tiles_x or ty0 >= tiles_y:
            continue
        if tx0 < 0:
            tx0 = 0
        if ty0 < 0:
            ty0 = 0
        if tx1 >= tiles_x:
            tx1 = tiles_x - 1
        if ty1 >= tiles_y:
            ty1 = tiles_y - 1
        out_flag[i] = 1
        out_mean2d[i, 0] = u
        out_mean2d[i, 1] = v
        out_cov2d[i, 0] = res[6]
        out_cov2d[i, 1] = res[7]
        out_cov2d[i, 2] = res[8]
        out_conic[i, 0] = res[10]
        out_conic[i, 1] = res[11]
        out_conic[i, 2] = res[12]
        out_depth[i] = res[3]
        out_color[i, 0] = res[15]
        out_color[i, 1] = res[16]
        out_color[i, 2] = res[17]
        out_opacity[i] = res[14]
        out_tiles[i, 0] = tx0
        out_tiles[i, 1] = ty0
        out_tiles[i, 2] = tx1
        out_tiles[i, 3] = ty1


@njit(cache=True, nogil=True)
def _count_tile_entries(tiles, tile_slot, tiles_x, counts):
    """Count splats per listed tile. ``tile_slot`` maps tile id -> slot or -1."""
    m = tiles.shape[0]
    for i in range(m):
        for ty in range(tiles[i, 1], tiles[i, 3] + 1):
            base = ty * tiles_x
            for tx in range(tiles[i, 0], tiles[i, 2] + 1):
                slot = tile_slot[base + tx]
                if slot >= 0:
                    counts[slot] += 1


@njit(cache=True, nogil=True)
def _fill_tile_entries(tiles, tile_slot, tiles_x, offsets, cursor, entries):
    """Scatter splat rows into per-tile segments, preserving row order."""
    m = tiles.shape[0]
    for i in range(m):
        for ty in range(tiles[i, 1], tiles[i, 3] + 1):
            base = ty * tiles_x
            for tx in range(tiles[i, 0], tiles[i, 2] + 1):
                slot = tile_slot[base + tx]
                if slot >= 0:
                    entries[offsets[slot] + cursor[slot]] = i
                    cursor[slot] += 1


@njit(cache=True, nogil=True)
def _forward_tiles(own_tiles, offsets, entries, mean2d, conic, color, opacity,
                   tiles_x, tile_size, width, height, background,
                   image, t_final, n_contrib, touched):
    """Composite the listed tiles front-to-back into the full-size canvases."""
    n_tiles = own_tiles.shape[0]
    for k in range(n_tiles):
        tid = own_tiles[k]
        ty = tid // tiles_x
        tx = tid % tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        e0 = offsets[k]
        e1 = offsets[k + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                t = 1.0
                cr = 0.0
                cg = 0.0
                cb = 0.0
                count = 0
                for e in range(e0, e1):
                    s = entries[e]
                    d0 = px - mean2d[s, 0]
                    d1 = py - mean2d[s, 1]
                    power = (-0.5 * (conic[s, 0] * d0 * d0 + conic[s, 2] * d1 * d1)
                             - conic[s, 1] * d0 * d1)
                    if power > 0.0:
                        continue
                    g = np.exp(power)
                    alpha = opacity[s] * g
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_SKIP:
                        continue
                    test = t * (1.0 - alpha)
                    if test < T_STOP:
                        break
                    cr += color[s, 0] * alpha * t
                    cg += color[s, 1] * alpha * t
                    cb += color[s, 2] * alpha * t
                    t = test
                    count += 1
                    touched[s] += 1
                image[py, px, 0] = cr + t * background[0]
                image[py, px, 1] = cg + t * background[1]
                image[py, px, 2] = cb + t * background[2]
                t_final[py, px] = t
                n_contrib[py, px] = count


@njit(cache=True, nogil=True)
def _backward_tiles(own_tiles, offsets, entries, mean2d, conic, color, opacity,
                    tiles_x, tile_size, width, height, background, dl_dimage,
                    scr_dmean, scr_dconic, scr_dcolor, scr_dopac):
    """Per-tile backward pass into scratch rows aligned with ``entries``.

    Each (tile, splat) pair accumulates its own subtotal over the tile's
    pixels; merging those subtotals in ascending tile order is the canonical
    reduction shared by the local and the message-passing paths.
    """
    n_tiles = own_tiles.shape[0]
    max_seg = 0
    for k in range(n_tiles):
        seg = offsets[k + 1] - offsets[k]
        if seg > max_seg:
            max_seg = seg
    acc_alpha = np.empty(max_seg, dtype=np.float64)
    acc_t = np.empty(max_seg, dtype=np.float64)
    acc_g = np.empty(max_seg, dtype=np.float64)
    acc_e = np.empty(max_seg, dtype=np.int64)
    for k in range(n_tiles):
        tid = own_tiles[k]
        ty = tid // tiles_x
        tx = tid % tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        x1 = min(x0 + tile_size, width)
        y1 = min(y0 + tile_size, height)
        e0 = offsets[k]
        e1 = offsets[k + 1]
        for py in range(y0, y1):
            for px in range(x0, x1):
                # Forward replay: collect the accepted contributions.
                t = 1.0
                count = 0
                for e in range(e0, e1):
                    s = entries[e]
                    d0 = px - mean2d[s, 0]
                    d1 = py - mean2d[s, 1]
                    power = (-0.5 * (conic[s, 0] * d0 * d0 + conic[s, 2] * d1 * d1)
                             - conic[s, 1] * d0 * d1)
                    if power > 0.0:
                        continue
                    g = np.exp(power)
                    alpha = opacity[s] * g
                    if alpha > ALPHA_CLAMP:
                        alpha = ALPHA_CLAMP
                    if alpha < ALPHA_SKIP:
                        continue
                    test = t * (1.0 - alpha)
                    if test < T_STOP:
                        break
                    acc_e[count] = e
                    acc_alpha[count] = alpha
                    acc_t[count] = t
                    acc_g[count] = g
                    t = test
                    count += 1
                wr = dl_dimage[py, px, 0]
                wg = dl_dimage[py, px, 1]
                wb = dl_dimage[py, px, 2]
                # Color accumulated behind the current splat, background included.
                sr = t * background[0]
                sg = t * background[1]
                sb = t * background[2]
                for i in range(count - 1, -1, -1):
                    e = acc_e[i]
                    s = entries[e]
                    alpha = acc_alpha[i]
                    ti = acc_t[i]
                    g = acc_g[i]
                    at = alpha * ti
                    scr_dcolor[e, 0] += wr * at
                    scr_dcolor[e, 1] += wg * at
                    scr_dcolor[e, 2] += wb * at
                    om = 1.0 - alpha
                    dalpha = (wr * (color[s, 0] * ti - sr / om)
                              + wg * (color[s, 1] * ti - sg / om)
                              + wb * (color[s, 2] * ti - sb / om))
                    sr += color[s, 0] * at
                    sg += color[s, 1] * at
                    sb += color[s, 2] * at
                    if opacity[s] * g > ALPHA_CLAMP:
                        continue  # clamped alpha: zero subgradient
                    dg = dalpha * opacity[s]
                    scr_dopac[e] += dalpha * g
                    dpower = dg * g
                    d0 = px - mean2d[s, 0]
                    d1 = py - mean2d[s, 1]
                    scr_dconic[e, 0] += dpower * (-0.5 * d0 * d0)
                    scr_dconic[e, 1] += dpower * (-(d0 * d1))
                    scr_dconic[e, 2] += dpower * (-0.5 * d1 * d1)
                    scr_dmean[e, 0] += dpower * (conic[s, 0] * d0 + conic[s, 1] * d1)
                    scr_dmean[e, 1] += dpower * (conic[s, 1] * d0 + conic[s, 2] * d1)


@njit(cache=True, nogil=True)
def _route_mask(rects, tiles_x, workers, mask):
    """Mark, per splat, every worker owning a tile of its (x0,y0,x1,y1) rect."""
    n = rects.shape[0]
    for i in range(n):
        x0 = rects[i, 0]
        y0 = rects[i, 1]
        x1 = rects[i, 2]
        y1 = rects[i, 3]
        if x1 - x0 + 1 >= workers:
            # A full row of tiles hits every residue class.
            for w in range(workers):
                mask[i, w] = 1
            continue
        for ty in range(y0, y1 + 1):
            base = ty * tiles_x
            for tx in range(x0, x1 + 1):
                mask[i, (base + tx) % workers] = 1


@njit(cache=True, nogil=True)
def _reduce_scratch(entries, scr_dmean, scr_dconic, scr_dcolor, scr_dopac,
                    acc_dmean, acc_dconic, acc_dcolor, acc_dopac):
    """Fold per-(tile, splat) subtotals into per-splat totals in segment order."""
    for e in range(entries.shape[0]):
        s = entries[e]
        acc_dmean[s, 0] += scr_dmean[e, 0]
        acc_dmean[s, 1] += scr_dmean[e, 1]
        acc_dconic[s, 0] += scr_dconic[e, 0]
        acc_dconic[s, 1] += scr_dconic[e, 1]
        acc_dconic[s, 2] += scr_dconic[e, 2]
        acc_dcolor[s, 0] += scr_dcolor[e, 0]
        acc_dcolor[s, 1] += scr_dcolor[e, 1]
        acc_dcolor[s, 2] += scr_dcolor[e, 2]
        acc_dopac[s] += scr_dopac[e]


@njit(cache=True, nogil=True)
def _chain_kernel(positions, log_scales, rotations, logits, sh, degree,
                  rot, trans, cam_center, fx, fy, cx, cy, flags,
                  acc_dmean, acc_dconic, acc_dcolor, acc_dopac,
                  out_dpos, out_dls, out_drot, out_dlogit, out_dsh):
    """Chain per-splat 2D gradients back to the 3D parameters.

    Recomputes the projection intermediates with the same core as the forward
    pass, so the chain sees bit-identical values.
    """
    n = positions.shape[0]
    for i in range(n):
        if flags[i] == 0:
            continue
        res = _project_core(
            positions[i, 0], positions[i, 1], positions[i, 2],
            log_scales[i, 0], log_scales[i, 1], log_scales[i, 2],
            rotations[i, 0], rotations[i, 1], rotations[i, 2], rotations[i, 3],
            logits[i], sh[i], degree,
            rot, trans[0], trans[1], trans[2],
            cam_center[0], cam_center[1], cam_center[2], fx, fy, cx, cy)
        if not res[0]:
            continue
        qcx = res[1]
        qcy = res[2]
        qcz = res[3]
        con_a = res[10]
        con_b = res[11]
        con_c = res[12]
        opac = res[14]
        pre_r = res[18]
        pre_g = res[19]
        pre_b = res[20]
        dirx = res[21]
        diry = res[22]
        dirz = res[23]
        vlen = res[24]
        nqw = res[25]
        nqx = res[26]
        nqy = res[27]
        nqz = res[28]
        qnorm = res[29]
        s20 = res[30]
        s21 = res[31]
        s22 = res[32]
        r00 = res[33]
        r01 = res[34]
        r02 = res[35]
        r10 = res[36]
        r11 = res[37]
        r12 = res[38]
        r20 = res[39]
        r21 = res[40]
        r22 = res[41]
        u00 = res[42]
        u01 = res[43]
        u02 = res[44]
        u10 = res[45]
        u11 = res[46]
        u12 = res[47]
        du = acc_dmean[i, 0]
        dv = acc_dmean[i, 1]
        dca = acc_dconic[i, 0]
        dcb = acc_dconic[i, 1]
        dcc = acc_dconic[i, 2]
        dcr = acc_dcolor[i, 0]
        dcg = acc_dcolor[i, 1]
        dcb_col = acc_dcolor[i, 2]
        dop = acc_dopac[i]

        # Color: clamps zero the channel, then SH and view-direction terms.
        if pre_r < 0.0 or pre_r > 1.0:
            dcr = 0.0
        if pre_g < 0.0 or pre_g > 1.0:
            dcg = 0.0
        if pre_b < 0.0 or pre_b > 1.0:
            dcb_col = 0.0
        out_dsh[i, 0, 0] += dcr * SH_C0
        out_dsh[i, 0, 1] += dcg * SH_C0
        out_dsh[i, 0, 2] += dcb_col * SH_C0
        ddirx = 0.0
        ddiry = 0.0
        ddirz = 0.0
        if degree >= 1:
            out_dsh[i, 1, 0] += dcr * (-SH_C1) * diry
            out_dsh[i, 1, 1] += dcg * (-SH_C1) * diry
            out_dsh[i, 1, 2] += dcb_col * (-SH_C1) * diry
            out_dsh[i, 2, 0] += dcr * SH_C1 * dirz
            out_dsh[i, 2, 1] += dcg * SH_C1 * dirz
            out_dsh[i, 2, 2] += dcb_col * SH_C1 * dirz
            out_dsh[i, 3, 0] += dcr * (-SH_C1) * dirx
            out_dsh[i, 3, 1] += dcg * (-SH_C1) * dirx
            out_dsh[i, 3, 2] += dcb_col * (-SH_C1) * dirx
            ddirx = (-SH_C1) * (dcr * sh[i, 3, 0] + dcg * sh[i, 3, 1] + dcb_col * sh[i, 3, 2])
            ddiry = (-SH_C1) * (dcr * sh[i, 1, 0] + dcg * sh[i, 1, 1] + dcb_col * sh[i, 1, 2])
            ddirz = SH_C1 * (dcr * sh[i, 2, 0] + dcg * sh[i, 2, 1] + dcb_col * sh[i, 2, 2])
        dot = dirx * ddirx + diry * ddiry + dirz * ddirz
        dpx = (ddirx - dirx * dot) / vlen
        dpy = (ddiry - diry * dot) / vlen
        dpz = (ddirz - dirz * dot) / vlen

        # Opacity logit through the sigmoid.
        out_dlogit[i] += dop * opac * (1.0 - opac)

        # conic = cov^{-1}: dL/dcov = -conic * Ghat * conic (packed off-diagonal).
        gh00 = dca
        gh01 = 0.5 * dcb
        gh11 = dcc
        t100 = con_a * gh00 + con_b * gh01
        t101 = con_a * gh01 + con_b * gh11
        t110 = con_b * gh00 + con_c * gh01
        t111 = con_b * gh01 + con_c * gh11
        k00 = -(t100 * con_a + t101 * con_b)
        k01 = -(t100 * con_b + t101 * con_c)
        k10 = -(t110 * con_a + t111 * con_b)
        k11 = -(t110 * con_b + t111 * con_c)

        # dL/dSigma = U^T K U.
        gs00 = u00 * (k00 * u00 + k01 * u10) + u10 * (k10 * u00 + k11 * u10)
        gs01 = u00 * (k00 * u01 + k01 * u11) + u10 * (k10 * u01 + k11 * u11)
        gs02 = u00 * (k00 * u02 + k01 * u12) + u10 * (k10 * u02 + k11 * u12)
        gs10 = u01 * (k00 * u00 + k01 * u10) + u11 * (k10 * u00 + k11 * u10)
        gs11 = u01 * (k00 * u01 + k01 * u11) + u11 * (k10 * u01 + k11 * u11)
        gs12 = u01 * (k00 * u02 + k01 * u12) + u11 * (k10 * u02 + k11 * u12)
        gs20 = u02 * (k00 * u00 + k01 * u10) + u12 * (k10 * u00 + k11 * u10)
        gs21 = u02 * (k00 * u01 + k01 * u11) + u12 * (k10 * u01 + k11 * u11)
        gs22 = u02 * (k00 * u02 + k01 * u12) + u12 * (k10 * u02 + k11 * u12)

        # dL/dU = (K + K^T) U Sigma, with Sigma = R diag(s2) R^T rebuilt here.
        c3_00 = r00 * s20 * r00 + r01 * s21 * r01 + r02 * s22 * r02
        c3_01 = r00 * s20 * r10 + r01 * s21 * r11 + r02 * s22 * r12
        c3_02 = r00 * s20 * r20 + r01 * s21 * r21 + r02 * s22 * r22
        c3_11 = r10 * s20 * r10 + r11 * s21 * r11 + r12 * s22 * r12
        c3_12 = r10 * s20 * r20 + r11 * s21 * r21 + r12 * s22 * r22
        c3_22 = r20 * s20 * r20 + r21 * s21 * r21 + r22 * s22 * r22
        p00 = 2.0 * k00
        p01 = k01 + k10
        p11 = 2.0 * k11
        a00 = p00 * u00 + p01 * u10
        a01 = p00 * u01 + p01 * u11
        a02 = p00 * u02 + p01 * u12
        a10 = p01 * u00 + p11 * u10
        a11 = p01 * u01 + p11 * u11
        a12 = p01 * u02 + p11 * u12
        gu00 = a00 * c3_00 + a01 * c3_01 + a02 * c3_02
        gu01 = a00 * c3_01 + a01 * c3_11 + a02 * c3_12
        gu02 = a00 * c3_02 + a01 * c3_12 + a02 * c3_22
        gu10 = a10 * c3_00 + a11 * c3_01 + a12 * c3_02
        gu11 = a10 * c3_01 + a11 * c3_11 + a12 * c3_12
        gu12 = a10 * c3_02 + a11 * c3_12 + a12 * c3_22

        # dL/dJ = dL/dU @ rot^T; only the four live J entries matter.
        gj00 = gu00 * rot[0, 0] + gu01 * rot[0, 1] + gu02 * rot[0, 2]
        gj02 = gu00 * rot[2, 0] + gu01 * rot[2, 1] + gu02 * rot[2, 2]
        gj11 = gu10 * rot[1, 0] + gu11 * rot[1, 1] + gu12 * rot[1, 2]
        gj12 = gu10 * rot[2, 0] + gu11 * rot[2, 1] + gu12 * rot[2, 2]

        # Camera-space position gradient from mean2d and the J entries.
        iz = 1.0 / qcz
        iz2 = iz * iz
        iz3 = iz2 * iz
        gq_x = du * (fx * iz) + gj02 * (-fx * iz2)
        gq_y = dv * (fy * iz) + gj12 * (-fy * iz2)
        gq_z = (du * (-fx * qcx * iz2) + dv * (-fy * qcy * iz2)
                + gj00 * (-fx * iz2) + gj02 * (2.0 * fx * qcx * iz3)
                + gj11 * (-fy * iz2) + gj12 * (2.0 * fy * qcy * iz3))
        dpx += rot[0, 0] * gq_x + rot[1, 0] * gq_y + rot[2, 0] * gq_z
        dpy += rot[0, 1] * gq_x + rot[1, 1] * gq_y + rot[2, 1] * gq_z
        dpz += rot[0, 2] * gq_x + rot[1, 2] * gq_y + rot[2, 2] * gq_z
        out_dpos[i, 0] += dpx
        out_dpos[i, 1] += dpy
        out_dpos[i, 2] += dpz

        # Scales: diag of R^T G_Sigma R, then d s2 / d log s = 2 s2.
        dm0 = (r00 * (gs00 * r00 + gs01 * r10 + gs02 * r20)
               + r10 * (gs10 * r00 + gs11 * r10 + gs12 * r20)
               + r20 * (gs20 * r00 + gs21 * r10 + gs22 * r20))
        dm1 = (r01 * (gs00 * r01 + gs01 * r11 + gs02 * r21)
               + r11 * (gs10 * r01 + gs11 * r11 + gs12 * r21)
               + r21 * (gs20 * r01 + gs21 * r11 + gs22 * r21))
        dm2 = (r02 * (gs00 * r02 + gs01 * r12 + gs02 * r22)
               + r12 * (gs10 * r02 + gs11 * r12 + gs12 * r22)
               + r22 * (gs20 * r02 + gs21 * r12 + gs22 * r22))
        out_dls[i, 0] += dm0 * 2.0 * s20
        out_dls[i, 1] += dm1 * 2.0 * s21
        out_dls[i, 2] += dm2 * 2.0 * s22

        # Rotation matrix gradient G_R = (G_Sigma + G_Sigma^T) R diag(s2).
        q00 = gs00 + gs00
        q01 = gs01 + gs10
        q02 = gs02 + gs20
        q11 = gs11 + gs11
        q12 = gs12 + gs21
        q22 = gs22 + gs22
        gr00 = (q00 * r00 + q01 * r10 + q02 * r20) * s20
        gr01 = (q00 * r01 + q01 * r11 + q02 * r21) * s21
        gr02 = (q00 * r02 + q01 * r12 + q02 * r22) * s22
        gr10 = (q01 * r00 + q11 * r10 + q12 * r20) * s20
        gr11 = (q01 * r01 + q11 * r11 + q12 * r21) * s21
        gr12 = (q01 * r02 + q11 * r12 + q12 * r22) * s22
        gr20 = (q02 * r00 + q12 * r10 + q22 * r20) * s20
        gr21 = (q02 * r01 + q12 * r11 + q22 * r21) * s21
        gr22 = (q02 * r02 + q12 * r12 + q22 * r22) * s22

        # Quaternion gradient via dR/d(nq), then through the normalization.
        dnw = 2.0 * (gr01 * (-nqz) + gr02 * nqy + gr10 * nqz
                     + gr12 * (-nqx) + gr20 * (-nqy) + gr21 * nqx)
        dnx = 2.0 * (gr01 * nqy + gr02 * nqz + gr10 * nqy
                     + gr11 * (-2.0 * nqx) + gr12 * (-nqw)
                     + gr20 * nqz + gr21 * nqw + gr22 * (-2.0 * nqx))
        dny = 2.0 * (gr00 * (-2.0 * nqy) + gr01 * nqx + gr02 * nqw
                     + gr10 * nqx + gr12 * nqz
                     + gr20 * (-nqw) + gr21 * nqz + gr22 * (-2.0 * nqy))
        dnz = 2.0 * (gr00 * (-2.0 * nqz) + gr01 * (-nqw) + gr02 * nqx
                     + gr10 * nqw + gr11 * (-2.0 * nqz) + gr12 * nqy
                     + gr20 * nqx + gr21 * nqy)
        ndot = nqw * dnw + nqx * dnx + nqy * dny + nqz * dnz
        out_drot[i, 0] += (dnw - nqw * ndot) / qnorm
        out_drot[i, 1] += (dnx - nqx * ndot) / qnorm
        out_drot[i, 2] += (dny - nqy * ndot) / qnorm
        out_drot[i, 3] += (dnz - nqz * ndot) / qnorm


@njit(cache=True, nogil=True)
def _knn_mean_grid(points, cell_of, order, starts, gx, gy, gz, cell, k, out):
    """Mean distance to each point's k nearest neighbors over a bucket grid.

    ``order`` lists point indices sorted by linear cell id and ``starts`` is
    the CSR offset array over cells (ids are (cz * gy + cy) * gx + cx). Rings
    of cells expand until the kth candidate distance is provably exact: any
    unvisited point differs by at least ring * cell along some axis.
    """
    n = points.shape[0]
    best = np.empty(k, dtype=np.float64)
    for i in range(n):
        cid = cell_of[i]
        cx = cid % gx
        cy = (cid // gx) % gy
        cz = cid // (gx * gy)
        found = 0
        ring = 0
        max_ring = max(gx, max(gy, gz))
        while True:
            a0 = max(cx - ring, 0)
            a1 = min(cx + ring, gx - 1)
            b0 = max(cy - ring, 0)
            b1 = min(cy + ring, gy - 1)
            c0 = max(cz - ring, 0)
            c1 = min(cz + ring, gz - 1)
            for c in range(c0, c1 + 1):
                for b in range(b0, b1 + 1):
                    for a in range(a0, a1 + 1):
                        da = cx - a if cx > a else a - cx
                        db = cy - b if cy > b else b - cy
                        dc = cz - c if cz > c else c - cz
                        cheb = max(da, max(db, dc))
                        if cheb != ring:
                            continue
                        lin = (c * gy + b) * gx + a
                        for s in range(starts[lin], starts[lin + 1]):
                            j = order[s]
                            if j == i:
                                continue
                            dx = points[j, 0] - points[i, 0]
                            dy = points[j, 1] - points[i, 1]
                            dz = points[j, 2] - points[i, 2]
                            d2 = dx * dx + dy * dy + dz * dz
                            if found < k:
                                best[found] = d2
                                found += 1
                                if found == k:
                                    # Keep the k slots sorted ascending.
                                    for u in range(1, k):
                                        key = best[u]
                                        t = u - 1
                                        while t >= 0 and best[t] > key:
                                            best[t + 1] = best[t]
                                            t -= 1
                                        best[t + 1] = key
                            elif d2 < best[k - 1]:
                                t = k - 2
                                while t >= 0 and best[t] > d2:
                                    best[t + 1] = best[t]
                                    t -= 1
                                best[t + 1] = d2
            reach = ring * cell
            if found >= k and best[k - 1] <= reach * reach:
                break
            if ring > max_ring:
                break
            ring += 1
        acc = 0.0
        for u in range(found):
            acc += np.sqrt(best[u])
        out[i] = acc / max(found, 1)
