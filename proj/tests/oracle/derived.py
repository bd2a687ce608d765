#!/usr/bin/env python3
# Independent reference values for the frozen constants in the unit tests.
# Plain numpy, written without looking at the C++ implementation.
import numpy as np

np.set_printoptions(precision=12)


def softmax(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def squash(s):
    n = np.linalg.norm(s)
    return (1 - np.exp(-n)) * s / n


def conv_valid(x, k):
    kh, kw = k.shape
    return np.array([[np.sum(x[i:i + kh, j:j + kw] * k) for j in range(x.shape[1] - kw + 1)]
                     for i in range(x.shape[0] - kh + 1)])


def routing(u_hat, d_l):
    # u_hat [n_l, n_l1, d_l1]
    n_l, n_l1, _ = u_hat.shape
    A = np.einsum('jkd,mkd->jmk', u_hat, u_hat) / np.sqrt(d_l)
    logits = A.sum(axis=1)
    C = np.stack([softmax(logits[j]) for j in range(n_l)])
    return A, C


def margin(lengths, targets, mp=0.9, mm=0.1, lam=0.5):
    lengths, targets = np.asarray(lengths, float), np.asarray(targets, float)
    per = targets * np.maximum(0, mp - lengths) ** 2 + lam * (1 - targets) * np.maximum(0, lengths - mm) ** 2
    return per.sum(axis=-1).mean()


def census(h, convs, primary, caps, cin=1):
    total = 0
    for k, f, s in convs:
        total += k * k * cin * f + f + 2 * f
        h = (h - k) // s + 1
        cin = f
    total += h * h * cin + cin
    n, d = primary
    for nu, du in caps:
        total += n * nu * d * du + n * nu
        n, d = nu, du
    return total, h


def main():
    print('softmax([2,0])', softmax(np.array([2.0, 0.0])))
    print('squash(e1)', squash(np.array([1.0, 0.0])))
    sq = squash(np.array([3.0, 4.0]))
    print('squash([3,4])', sq, np.linalg.norm(sq))
    print('conv 2x2 ones', conv_valid(np.array([[1.0, 2], [3, 4]]), np.ones((2, 2))))
    print('matmul', np.array([[1.0, 2]]) @ np.array([[3.0], [4]]))
    x = np.array([-1.0, 1.0])
    print('batchnorm [-1,1]', (x - x.mean()) / np.sqrt(x.var() + 1e-5))

    # two lower capsules, two upper capsules, d_l = d_l1 = 1
    u_hat = np.array([[[1.0], [1.0]], [[1.0], [-1.0]]])
    A, C = routing(u_hat, 1)
    print('hand A[:,:,0]', A[:, :, 0], 'A[:,:,1]', A[:, :, 1])
    print('hand C', C)
    A1, _ = routing(np.array([[[1.0]], [[1.0]]]), 1)
    print('identical predictions A[:,:,0]', A1[:, :, 0])

    print('margin at m+', margin([0.9], [1]))
    print('margin present 0.3', margin([0.3], [1]))
    print('margin absent 0.8', margin([0.8], [0]))
    print('margin pair', margin([[0.3, 0.8]], [[1, 0]]))
    img = np.linspace(0, 0.8, 4)
    rec = np.mean((img + 0.1 - img) ** 2)
    print('recon offset 0.1', rec)
    print('total r=0.392', margin([[0.3, 0.8]], [[1, 0]]) + 0.392 * rec)
    print('0.0005*784', 0.0005 * 784)

    print('lr epoch 1', 5e-4 * 0.98)
    m = 0.1 * 1.0
    v = 0.001 * 1.0
    print('adam first step', -5e-4 * (m / 0.1) / (np.sqrt(v / 0.001) + 1e-8))

    convs = [(5, 32, 1), (3, 64, 1), (3, 64, 1), (3, 128, 2)]
    print('mnist census, feature map', census(28, convs, (16, 8), [(10, 16)]))
    print('multimnist census, feature map',
          census(36, [(5, 32, 1), (3, 64, 1), (3, 64, 2), (3, 128, 2)], (16, 8), [(10, 16)]))
    print('conv1 params', 5 * 5 * 1 * 32 + 32, 'caps W', 16 * 10 * 8 * 16, 'caps B', 16 * 10)
    print('decoder params', 160 * 512 + 512 + 512 * 1024 + 1024 + 1024 * 784 + 784)

    # frame overlap: shared area of two 28x28 frames shifted uniformly in [-4, 4]
    s = np.arange(-4, 5)
    d = np.abs(s[:, None] - s[None, :]).mean()
    print('expected frame overlap', (1 - d / 28) ** 2)


if __name__ == '__main__':
    main()
