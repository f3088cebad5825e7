#!/usr/bin/env python3
"""Eval command - PSNR/SSIM between two images plus optional mask IoU"""

import sys

from data import read_png
from metrics import MetricReport, mask_iou, psnr, ssim
from utils import UsageError

EVAL_SPEC = {
    "toolSpec": {
        "name": "eval",
        "description": "Compare a predicted image against a reference; prints a MetricReport as one JSON line",
        "inputSchema": {
            "json": {
                "type": "object",
                "properties": {
                    "pred": {"type": "string", "description": "Predicted image (PNG)"},
                    "ref": {"type": "string", "description": "Reference image (PNG)"},
                    "mask_pred": {"type": "string", "description": "Predicted alpha matte (PNG)"},
                    "mask_ref": {"type": "string", "description": "Reference alpha matte (PNG)"}
                },
                "required": ["pred", "ref"]
            }
        }
    }
}


def eval_command(params):
    """Score pred against ref; stdout is left to the report line"""
    if bool(params.get('mask_pred')) != bool(params.get('mask_ref')):
        raise UsageError("mask IoU needs both --mask-pred and --mask-ref")
    pred, ref = read_png(params['pred']), read_png(params['ref'])
    report = MetricReport(psnr(pred, ref), ssim(pred, ref))
    if params.get('mask_pred'):
        report.iou = mask_iou(read_png(params['mask_pred']), read_png(params['mask_ref']))
    print(f"[EVAL] {params['pred']} vs {params['ref']}: PSNR {report.psnr_db:.2f} dB, SSIM {report.ssim:.4f}",
          file=sys.stderr)
    return report.to_dict()
