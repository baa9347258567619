import math
import unittest

import numpy as np

from src import numkit
from src.errors import DomainError, NonFiniteError, ShapeError, SingularMatrixError, TapeError
from src.numkit import Parameter, SquareMatrix, Tensor


def _column(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(1, -1, 1, 1)


class TestTape(unittest.TestCase):
    def test_backward_of_square(self):
        """Test the adjoint of sum(x * x) is 2x"""
        x = Parameter("x", _column([1.0, -2.0, 3.0]))

        with numkit.recording() as tape:
            loss = numkit.sum_all(x * x)
        grads = tape.backward(loss)

        # Check the gradient is keyed by parameter name
        np.testing.assert_allclose(grads["x"], 2 * x.data)

    def test_fan_out_accumulates(self):
        """Test a parameter used twice receives the sum of both adjoints"""
        x = Parameter("x", _column([0.5, 1.5]))

        with numkit.recording() as tape:
            loss = numkit.sum_all(x * x + x * 3.0)

        # Check d/dx (x^2 + 3x) = 2x + 3
        np.testing.assert_allclose(tape.backward(loss)["x"], 2 * x.data + 3.0)

    def test_unused_parameter_has_zero_gradient(self):
        """Test gradient() returns zeros for tensors the root does not reach"""
        x = Parameter("x", _column([1.0]))
        y = Parameter("y", _column([2.0]))

        with numkit.recording() as tape:
            loss = numkit.sum_all(numkit.exp(x))
        gx, gy = tape.gradient(loss, [x, y])

        # Check values
        self.assertAlmostEqual(float(gx.reshape(-1)[0]), math.e)
        self.assertEqual(float(gy.reshape(-1)[0]), 0.0)

    def test_paused_records_nothing(self):
        """Test operations inside paused() are not tracked by the enclosing tape"""
        x = Parameter("x", _column([1.0, 2.0]))

        with numkit.recording() as tape:
            with numkit.paused():
                detached = x * 2.0
            tracked = x * 2.0

            # Check only the second product is on the tape
            self.assertIsNone(detached.tape_id)
            self.assertIsNotNone(tracked.tape_id)

        # Check a detached root cannot be differentiated
        with self.assertRaises(TapeError):
            tape.backward(numkit.sum_all(detached))

    def test_backward_needs_scalar_root(self):
        """Test differentiating a non-scalar root is rejected"""
        x = Parameter("x", _column([1.0, 2.0]))

        with numkit.recording() as tape:
            y = x * x

        with self.assertRaises(TapeError):
            tape.backward(y)

    def test_tapes_are_per_thread(self):
        """Test a recording block on one thread is invisible to another"""
        from concurrent.futures import ThreadPoolExecutor

        with numkit.recording():
            with ThreadPoolExecutor(max_workers=1) as executor:
                seen = executor.submit(numkit.active_tape).result()

        # Check the worker thread has no active tape
        self.assertIsNone(seen)


class TestElementwise(unittest.TestCase):
    def test_log_of_non_positive(self):
        """Test log() raises a domain error naming the position"""
        with self.assertRaises(DomainError) as ctx:
            numkit.log(Tensor(_column([1.0, 0.0])))

        # Check the message carries the index
        self.assertIn("(0, 1, 0, 0)", str(ctx.exception))

    def test_non_finite_result(self):
        """Test an overflowing exp() raises NonFiniteError"""
        with self.assertRaises(NonFiniteError):
            numkit.exp(Tensor(_column([1000.0])))

    def test_log_sigmoid_is_stable(self):
        """Test log_sigmoid of large negative inputs stays finite"""
        out = numkit.log_sigmoid(Tensor(_column([-800.0, 0.0])))

        # Check values
        np.testing.assert_allclose(out.data.reshape(-1), [-800.0, -math.log(2.0)])

    def test_shape_mismatch(self):
        """Test adding tensors of different shapes is rejected"""
        with self.assertRaises(ShapeError):
            numkit.add(Tensor(np.zeros((1, 2, 1, 1))), Tensor(np.zeros((1, 3, 1, 1))))

    def test_tensors_are_rank_four(self):
        """Test constructing a tensor from a matrix is rejected"""
        with self.assertRaises(ShapeError):
            Tensor(np.zeros((2, 2)))


class TestReshaping(unittest.TestCase):
    def test_squeeze_roundtrip(self):
        """Test squeeze moves 2x2 blocks to channels and unsqueeze undoes it"""
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))

        y = numkit.squeeze2x2(x)

        # Check shape
        self.assertEqual(y.shape, (1, 4, 2, 2))

        # Check the first channel holds the top-left pixel of each block
        np.testing.assert_array_equal(y.data[0, 0], [[0.0, 2.0], [8.0, 10.0]])

        # Check exact inverse
        np.testing.assert_array_equal(numkit.unsqueeze2x2(y).data, x.data)

    def test_squeeze_needs_even_size(self):
        """Test squeezing an odd spatial size is rejected"""
        with self.assertRaises(ShapeError):
            numkit.squeeze2x2(Tensor(np.zeros((1, 1, 3, 4))))

    def test_expand_gradient_sums(self):
        """Test the adjoint of expand sums over the tiled axes"""
        x = Parameter("x", np.ones((1, 1, 1, 1)))

        with numkit.recording() as tape:
            loss = numkit.sum_all(numkit.expand(x, (2, 3, 2, 2)))

        # Check value
        self.assertEqual(float(tape.backward(loss)["x"].reshape(-1)[0]), 24.0)

    def test_gather_scatter(self):
        """Test scattering gathered positions restores them and zeros the rest"""
        x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
        index = np.array([[0, 3]])

        rows = numkit.gather_positions(x, index)
        back = numkit.scatter_positions(rows, index, (2, 2))

        # Check shapes and values
        self.assertEqual(rows.shape, (1, 2, 1, 2))
        np.testing.assert_array_equal(back.data[0, 0], [[0.0, 0.0], [0.0, 3.0]])
        np.testing.assert_array_equal(back.data[0, 1], [[4.0, 0.0], [0.0, 7.0]])


class TestChannelMixing(unittest.TestCase):
    def test_conv1x1(self):
        """Test a 1x1 convolution applies the matrix at every position"""
        x = Tensor(np.array([1.0, 2.0]).reshape(1, 2, 1, 1) * np.ones((1, 2, 2, 2)))
        weight = np.array([[0.0, 1.0], [2.0, 0.0]])

        y = numkit.conv1x1(x, weight)

        # Check channel values
        np.testing.assert_array_equal(y.data[0, 0], np.full((2, 2), 2.0))
        np.testing.assert_array_equal(y.data[0, 1], np.full((2, 2), 2.0))

    def test_conv1x1_weight_gradient(self):
        """Test the weight adjoint of a 1x1 convolution"""
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 3, 2, 2)))
        w = Parameter("w", rng.normal(size=(1, 1, 2, 3)))

        with numkit.recording() as tape:
            loss = numkit.sum_all(numkit.conv1x1(x, w))

        # Check d/dW_oc sum(W x) = sum of x over batch and space
        expected = np.broadcast_to(x.data.sum(axis=(0, 2, 3)), (2, 3))
        np.testing.assert_allclose(tape.backward(loss)["w"][0, 0], expected)

    def test_conv2d_identity_kernel(self):
        """Test a centred delta kernel reproduces the input"""
        x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0

        # Check values
        np.testing.assert_array_equal(numkit.conv2d(x, Tensor(kernel)).data, x.data)


class TestLinearAlgebra(unittest.TestCase):
    def test_logdet_and_solve(self):
        """Test LU log-determinant and solve of a small SPD matrix"""
        matrix = SquareMatrix(np.array([[2.0, 1.0], [1.0, 3.0]]))

        result = numkit.lu_logdet_solve(matrix, np.array([3.0, 4.0]))

        # Check det = 5 and the solution of the system
        self.assertEqual(result.sign, 1.0)
        self.assertAlmostEqual(result.logabsdet, math.log(5.0))
        np.testing.assert_allclose(result.solution, [1.0, 1.0])

    def test_sign_of_permutation(self):
        """Test a row swap yields determinant -1"""
        result = numkit.lu_logdet_solve(SquareMatrix(np.array([[0.0, 1.0], [1.0, 0.0]])))

        # Check values
        self.assertEqual(result.sign, -1.0)
        self.assertAlmostEqual(result.logabsdet, 0.0)

    def test_reconstruct(self):
        """Test the LU factors multiply back to the matrix"""
        entries = np.random.default_rng(1).normal(size=(4, 4))

        # Check P L U == A
        np.testing.assert_allclose(SquareMatrix(entries).reconstruct(), entries, atol=1e-12)

    def test_singular_matrix(self):
        """Test a rank-deficient matrix raises SingularMatrixError with the pivot"""
        with self.assertRaises(SingularMatrixError) as ctx:
            numkit.lu_logdet_solve(SquareMatrix(np.array([[1.0, 2.0], [2.0, 4.0]])))

        # Check the failing pivot is the second one
        self.assertEqual(ctx.exception.pivot, 1)

    def test_block_logdet_gradient(self):
        """Test the adjoint of log|det W| is inv(W)^T for every block"""
        rng = np.random.default_rng(2)
        blocks = np.eye(3) * 2.0 + rng.normal(0.0, 0.3, (1, 2, 3, 3))
        w = Parameter("w", blocks)

        with numkit.recording() as tape:
            logdets = numkit.block_logdet(w)
            loss = numkit.sum_all(logdets)
        grad = tape.backward(loss)["w"]

        for p in range(2):
            # Check value and adjoint of each block
            self.assertAlmostEqual(
                float(logdets.data[0, p, 0, 0]), np.linalg.slogdet(blocks[0, p])[1]
            )
            np.testing.assert_allclose(grad[0, p], np.linalg.inv(blocks[0, p]).T, atol=1e-12)

    def test_block_logdet_reports_patch(self):
        """Test a singular block is reported with its patch and head"""
        blocks = np.stack([np.eye(2), np.zeros((2, 2))])[None]

        with self.assertRaises(SingularMatrixError) as ctx:
            numkit.block_logdet(Tensor(blocks), head=2)

        # Check indices
        self.assertEqual(ctx.exception.patch, 1)
        self.assertEqual(ctx.exception.head, 2)

    def test_softmax_rows(self):
        """Test softmax rows are positive and sum to one"""
        scores = Tensor(np.random.default_rng(3).normal(size=(1, 2, 3, 3)))

        out = numkit.softmax_rows(scores).data

        # Check values
        self.assertTrue((out > 0).all())
        np.testing.assert_allclose(out.sum(axis=3), np.ones((1, 2, 3)))
