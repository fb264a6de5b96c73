"""Stand-in for external preprocessing tools, used by the adapter tests.

usage: mock_tool.py MODE INPUT OUTPUT [AFFINE]
  bias      multiply intensities by a smooth field
  identity  copy the input
  register  copy the input and write a translation matrix to AFFINE
  fail      exit with status 3
  sleep     sleep for 30 s
  reshape   write a cropped image (grid change)
"""

import sys
import time

import nibabel as nib
import numpy as np

mode, src, dst = sys.argv[1:4]
if mode == "fail":
    print("simulated failure", file=sys.stderr)
    sys.exit(3)
if mode == "sleep":
    time.sleep(30)
img = nib.load(src)
data = np.asarray(img.dataobj, dtype=np.float32)
if mode == "bias":
    x = np.linspace(0, 1, data.shape[0])[:, None, None]
    data = data * (1.0 + 0.2 * x)
elif mode == "reshape":
    data = data[1:]
if mode == "register":
    m = np.eye(4)
    m[:3, 3] = [3.0, -2.0, 1.0]
    np.savetxt(sys.argv[4], m)
nib.save(nib.Nifti1Image(data, img.affine), dst)
