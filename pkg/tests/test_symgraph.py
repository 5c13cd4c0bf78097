import numpy as np
import pytest

import neuropt.symgraph as sg
from helpers import fd_jacobian, random_expression, rel_err


def scalar_fn(expr, x):
    return sg.SymFunction([x], [expr])


class TestConstruction:
    def test_symbol_shape(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        assert x.shape == (2, 1)
        assert x.op is sg.OpKind.SYMBOL

    def test_duplicate_symbol_rejected(self):
        g = sg.ExprGraph()
        g.symbol("x", 2, 1)
        with pytest.raises(sg.GraphError, match="'x'"):
            g.symbol("x", 2, 1)

    def test_scalar_symbol(self):
        g = sg.ExprGraph()
        t = g.symbol("t", 1, 1)
        assert t.is_scalar()

    def test_constant_shapes(self):
        g = sg.ExprGraph()
        c = g.constant([[1, 2], [3, 4]])
        assert c.shape == (2, 2)
        z = g.constant([[0]])
        assert z.shape == (1, 1)

    def test_constant_eval_identity(self):
        g = sg.ExprGraph()
        payload = np.array([[1.25, -2.5], [3.75, 4.0]])
        c = g.constant(payload)
        x = g.symbol("x", 1, 1)
        fn = sg.SymFunction([x], [c])
        out = fn(np.zeros((1, 1)))[0]
        assert (out == payload).all()

    def test_ragged_constant_rejected(self):
        g = sg.ExprGraph()
        with pytest.raises(sg.GraphError):
            g.constant([[1, 2], [3]])

    def test_operands_precede_node(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 3, 1)
        f = sg.sumsq(sg.tanh(g.constant(np.eye(3)) @ x + 1.0))
        for idx, node in enumerate(g._nodes):
            assert all(o < idx for o in node.operands)
        assert f.shape == (1, 1)


class TestElementwise:
    def test_add_same_shape(self):
        g = sg.ExprGraph()
        a = g.symbol("a", 2, 1)
        out = sg.apply_binary(sg.OpKind.ADD, a, g.constant([[1.0], [2.0]]))
        assert out.shape == (2, 1)

    def test_scalar_broadcast(self):
        g = sg.ExprGraph()
        a = g.symbol("a", 3, 1)
        out = sg.apply_binary(sg.OpKind.MUL, g.constant(2.0), a)
        assert out.shape == (3, 1)
        fn = sg.SymFunction([a], [out])
        v = np.array([[1.0], [2.0], [3.0]])
        assert (fn(v)[0] == 2.0 * v).all()

    def test_incompatible_shapes(self):
        g = sg.ExprGraph()
        a = g.symbol("a", 2, 1)
        b = g.symbol("b", 3, 1)
        with pytest.raises(sg.ShapeError, match=r"\(2, 1\).*\(3, 1\)"):
            sg.apply_binary(sg.OpKind.ADD, a, b)

    @pytest.mark.parametrize("kind,arg,expect", [
        (sg.OpKind.TANH, 0.0, 0.0),
        (sg.OpKind.SIGMOID, 0.0, 0.5),
        (sg.OpKind.RELU, -1.0, 0.0),
        (sg.OpKind.RELU, 2.0, 2.0),
    ])
    def test_unary_values(self, kind, arg, expect):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        fn = sg.SymFunction([x], [sg.apply_unary(kind, x)])
        assert fn(np.array([[arg]]))[0][0, 0] == expect

    def test_div_by_zero_reports_node(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        fn = sg.SymFunction([x], [g.constant(1.0) / x])
        with pytest.raises(sg.EvalError, match="node"):
            fn(np.array([[0.0]]))


class TestMatmulAndReductions:
    def test_hand_product(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        w = g.constant([[1.0, 2.0], [3.0, 4.0]])
        fn = sg.SymFunction([x], [w @ x])
        out = fn(np.array([[1.0], [1.0]]))[0]
        assert (out == np.array([[3.0], [7.0]])).all()

    def test_identity(self):
        g = sg.ExprGraph()
        v = g.symbol("v", 3, 1)
        fn = sg.SymFunction([v], [g.constant(np.eye(3)) @ v])
        x = np.array([[1.5], [-2.0], [0.25]])
        assert (fn(x)[0] == x).all()

    def test_inner_dim_mismatch(self):
        g = sg.ExprGraph()
        a = g.symbol("a", 2, 3)
        b = g.symbol("b", 4, 1)
        with pytest.raises(sg.ShapeError):
            sg.matmul(a, b)

    def test_sumsq_examples(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        fn = sg.SymFunction([x], [sg.sumsq(x)])
        assert fn(np.array([[3.0], [4.0]]))[0][0, 0] == 25.0
        assert fn(np.zeros((2, 1)))[0][0, 0] == 0.0
        t = g.symbol("t", 1, 1)
        fn2 = sg.SymFunction([t], [sg.sumsq(t)])
        assert fn2(np.array([[2.0]]))[0][0, 0] == 4.0

    def test_concat_column_mismatch(self):
        g = sg.ExprGraph()
        a = g.symbol("a", 2, 1)
        b = g.symbol("b", 2, 2)
        with pytest.raises(sg.ShapeError):
            sg.concat([a, b])

    def test_transpose_eval(self):
        g = sg.ExprGraph()
        a = g.symbol("a", 2, 3)
        fn = sg.SymFunction([a], [sg.transpose(a)])
        v = np.arange(6.0).reshape(2, 3)
        assert (fn(v)[0] == v.T).all()


class TestJacobian:
    def test_linear_map(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        w_val = np.array([[1.0, -2.0], [0.5, 3.0]])
        f = g.constant(w_val) @ x + g.constant([[0.1], [0.2]])
        jac = sg.jacobian(f, x)
        fn = sg.SymFunction([x], [jac])
        for point in (np.zeros((2, 1)), np.array([[2.0], [-1.0]])):
            assert np.abs(fn(point)[0] - w_val).max() == 0.0

    def test_identity_map(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 3, 1)
        fn = sg.SymFunction([x], [sg.jacobian(x, x)])
        assert (fn(np.ones((3, 1)))[0] == np.eye(3)).all()

    def test_tanh_matches_fd(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        y = sg.tanh(x)
        fn = sg.SymFunction([x], [y])
        jfn = sg.SymFunction([x], [sg.jacobian(y, x)])
        x0 = np.array([[0.3]])
        sym = jfn(x0)[0]
        fd = fd_jacobian(fn, x0)
        assert rel_err(fd, sym) < 1e-6

    def test_requires_symbol(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        with pytest.raises(sg.GraphError):
            sg.jacobian(x + 1.0, x + 0.0)

    def test_relu_kink_uses_zero(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        jfn = sg.SymFunction([x], [sg.jacobian(sg.relu(x), x)])
        assert jfn(np.array([[0.0]]))[0][0, 0] == 0.0
        assert jfn(np.array([[1.0]]))[0][0, 0] == 1.0
        assert jfn(np.array([[-1.0]]))[0][0, 0] == 0.0

    def test_pow_matches_fd(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        y = sg.power(x, 3.0) + sg.power(x, 2.0)
        fn = sg.SymFunction([x], [y])
        jfn = sg.SymFunction([x], [sg.jacobian(y, x)])
        x0 = np.array([[1.3], [-0.7]])
        assert rel_err(fd_jacobian(fn, x0), jfn(x0)[0]) < 1e-6


class TestHessian:
    def test_sumsq_hessian(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 3, 1)
        hess, grad = sg.hessian(sg.sumsq(x), x)
        fn = sg.SymFunction([x], [hess, grad])
        h, gr = fn(np.array([[1.0], [2.0], [3.0]]))
        assert np.abs(h - 2.0 * np.eye(3)).max() == 0.0
        assert np.abs(gr - np.array([[2.0], [4.0], [6.0]])).max() == 0.0

    def test_quadratic_form(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 3, 1)
        a_val = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, -0.25], [0.0, -0.25, 3.0]])
        f = sg.matmul(sg.matmul(sg.transpose(x), g.constant(a_val)), x)
        hess, _ = sg.hessian(f, x)
        fn = sg.SymFunction([x], [hess])
        h = fn(np.array([[0.3], [-1.0], [0.7]]))[0]
        assert np.abs(h - 2.0 * a_val).max() < 1e-12

    def test_mlp_hessian_matches_fd(self):
        import neuropt.learned as ln
        rng = np.random.default_rng(7)
        w1 = rng.normal(size=(8, 3)) * 0.6
        b1 = rng.normal(size=8) * 0.2
        w2 = rng.normal(size=(1, 8)) * 0.6
        b2 = rng.normal(size=1) * 0.2
        spec = ln.make_mlp_spec([(w1, b1), (w2, b2)])
        g = sg.ExprGraph()
        x = g.symbol("x", 3, 1)
        f = ln.embed_mlp(spec, x)
        hess, grad = sg.hessian(f, x)
        grad_fn = sg.SymFunction([x], [grad])
        hess_fn = sg.SymFunction([x], [hess])
        x0 = rng.uniform(-1, 1, size=(3, 1))
        fd = fd_jacobian(grad_fn, x0)
        assert rel_err(fd, hess_fn(x0)[0]) < 1e-5

    def test_symmetry(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            fn, n = random_expression(rng)
            x = fn.inputs[0]
            hess, _ = sg.hessian(fn.outputs[0], x)
            hfn = sg.SymFunction([x], [hess])
            h = hfn(rng.uniform(-2, 2, size=(n, 1)))[0]
            assert np.abs(h - h.T).max() <= 1e-12

    def test_requires_scalar(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        with pytest.raises(sg.ShapeError):
            sg.hessian(x, x)


class TestGradients:
    def test_matrix_symbol_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        g = sg.ExprGraph()
        w = g.symbol("w", 2, 3)
        x_val = rng.uniform(-1, 1, size=(3, 4))
        y_val = rng.uniform(-1, 1, size=(2, 4))
        loss = sg.sumsq(sg.tanh(sg.matmul(w, g.constant(x_val))) - g.constant(y_val))
        (gw,) = sg.gradients(loss, [w])
        loss_fn = sg.SymFunction([w], [loss])
        grad_fn = sg.SymFunction([w], [gw])
        w0 = rng.uniform(-0.5, 0.5, size=(2, 3))
        sym = grad_fn(w0)[0]
        h = 1e-6
        for i in range(2):
            for j in range(3):
                e = np.zeros((2, 3))
                e[i, j] = h
                fp = loss_fn(w0 + e)[0][0, 0]
                fm = loss_fn(w0 - e)[0][0, 0]
                assert abs((fp - fm) / (2 * h) - sym[i, j]) < 1e-6

    def test_broadcast_scalar_gradient(self):
        g = sg.ExprGraph()
        c = g.symbol("c", 1, 1)
        v = g.constant([[1.0], [2.0], [3.0]])
        loss = sg.sumsq(c * v)
        (gc,) = sg.gradients(loss, [c])
        fn = sg.SymFunction([c], [gc])
        # d/dc sum (c v)^2 = 2 c sum v^2 = 28 c
        assert abs(fn(np.array([[0.5]]))[0][0, 0] - 14.0) < 1e-12

    def test_unused_symbol_gets_zero(self):
        g = sg.ExprGraph()
        a = g.symbol("a", 2, 1)
        b = g.symbol("b", 3, 1)
        ga, gb = sg.gradients(sg.sumsq(a), [a, b])
        assert gb.op is sg.OpKind.CONSTANT
        assert gb.shape == (3, 1)


class TestSubstitute:
    def test_substitute_constant(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        e = x + 1.0
        e2 = sg.substitute(e, {x: g.constant(2.0)})
        t = g.symbol("_t", 1, 1)
        fn = sg.SymFunction([t], [e2])
        assert fn(np.zeros((1, 1)))[0][0, 0] == 3.0

    def test_empty_bindings_identity(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        e = sg.tanh(x) + 1.0
        assert sg.substitute(e, {}) == e

    def test_rename_commutes_with_evaluation(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        y = g.symbol("y", 2, 1)
        e = sg.sumsq(sg.sin(x) + x * 2.0)
        e_y = sg.substitute(e, {x: y})
        v = np.array([[0.7], [-0.3]])
        out_x = sg.SymFunction([x], [e])(v)[0]
        out_y = sg.SymFunction([y], [e_y])(v)[0]
        assert (out_x == out_y).all()

    def test_shape_mismatch_rejected(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        with pytest.raises(sg.ShapeError):
            sg.substitute(x + 1.0, {x: g.constant(1.0)})

    def test_substitution_evaluation_commute_exactly(self):
        rng = np.random.default_rng(5)
        fn, n = random_expression(rng)
        x = fn.inputs[0]
        v = rng.uniform(-2, 2, size=(n, 1))
        direct = sg.evaluate(fn, [v])[0]
        g = fn.graph
        substituted = sg.substitute(fn.outputs[0], {x: g.constant(v)})
        dummy = g.symbol("_dummy", 1, 1)
        via_sub = sg.SymFunction([dummy], [substituted])(np.zeros((1, 1)))[0]
        assert (direct == via_sub).all()


class TestEvaluate:
    def test_affine_example(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        f = g.constant(np.eye(2)) @ x + g.constant([[1.0], [1.0]])
        out = sg.evaluate(sg.SymFunction([x], [f]), [np.array([[2.0], [3.0]])])[0]
        assert (out == np.array([[3.0], [4.0]])).all()

    def test_log_domain_error(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        fn = sg.SymFunction([x], [sg.log(x)])
        with pytest.raises(sg.EvalError, match="node"):
            fn(np.array([[-1.0]]))

    def test_sqrt_domain_error(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        fn = sg.SymFunction([x], [sg.sqrt(x)])
        with pytest.raises(sg.EvalError):
            fn(np.array([[-0.5]]))

    def test_arity_error(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        fn = sg.SymFunction([x], [x + 1.0])
        with pytest.raises(sg.EvalError, match="expected 1 inputs"):
            sg.evaluate(fn, [np.zeros((1, 1)), np.zeros((1, 1))])

    def test_shape_error(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 2, 1)
        fn = sg.SymFunction([x], [x + 1.0])
        with pytest.raises(sg.EvalError, match="shape"):
            fn(np.zeros((3, 1)))

    def test_deterministic_bit_identical(self):
        rng = np.random.default_rng(13)
        fn, n = random_expression(rng)
        v = rng.uniform(-2, 2, size=(n, 1))
        a = sg.evaluate(fn, [v])[0]
        b = sg.evaluate(fn, [v])[0]
        assert (a == b).all()

    def test_free_symbol_rejected(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        t = g.symbol("t", 1, 1)
        with pytest.raises(sg.GraphError, match="'t'"):
            sg.SymFunction([x], [x + t])


class TestFunctionNames:
    def test_duplicate_name_rejected(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        name = "unique_fn_name_for_test"
        sg.SymFunction([x], [x + 1.0], name=name)
        with pytest.raises(sg.GraphError, match=name):
            sg.SymFunction([x], [x + 2.0], name=name)

    def test_invalid_identifier_rejected(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 1, 1)
        with pytest.raises(sg.GraphError):
            sg.SymFunction([x], [x], name="not a name")


class TestRemainingOpDerivatives:
    def test_div_log_sqrt_transpose_concat_match_fd(self):
        g = sg.ExprGraph()
        x = g.symbol("x", 3, 1)
        q = sg.sumsq(x)
        ratio = (q + 1.0) / (q + 3.0)             # scalar / scalar
        spread = x / (q + 2.0)                    # matrix / scalar broadcast
        inverted = 2.0 / (sg.power(x, 2.0) + 1.5)  # scalar / matrix broadcast
        stacked = sg.concat([spread, inverted, sg.transpose(sg.transpose(x))])
        f = (sg.sumsq(stacked) + sg.log(q + 0.5) + sg.sqrt(q + 0.25)
             - sg.sumsq(-x) * 0.5 + ratio)
        fn = sg.SymFunction([x], [f])
        jac = sg.jacobian(f, x)
        hess, grad = sg.hessian(f, x)
        jfn = sg.SymFunction([x], [jac])
        gfn = sg.SymFunction([x], [grad])
        hfn = sg.SymFunction([x], [hess])
        rng = np.random.default_rng(23)
        for _ in range(5):
            x0 = rng.uniform(-2, 2, size=(3, 1))
            assert rel_err(fd_jacobian(fn, x0), jfn(x0)[0]) < 1e-6
            h = hfn(x0)[0]
            assert rel_err(fd_jacobian(gfn, x0), h) < 1e-5
            assert np.abs(h - h.T).max() <= 1e-12


class TestConcurrency:
    def test_parallel_evaluation_is_consistent(self):
        import concurrent.futures

        rng = np.random.default_rng(17)
        fn, n = random_expression(rng)
        points = [rng.uniform(-2, 2, size=(n, 1)) for _ in range(32)]
        expected = [sg.evaluate(fn, [p])[0] for p in points]
        with concurrent.futures.ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(lambda p: sg.evaluate(fn, [p])[0], points))
        for a, b in zip(expected, results):
            assert (a == b).all()


class TestDerivativeProperty:
    def test_random_expressions_match_fd(self):
        rng = np.random.default_rng(101)
        for _ in range(25):
            fn, n = random_expression(rng)
            x = fn.inputs[0]
            jac = sg.jacobian(fn.outputs[0], x)
            jfn = sg.SymFunction([x], [jac])
            x0 = rng.uniform(-2, 2, size=(n, 1))
            assert rel_err(fd_jacobian(fn, x0), jfn(x0)[0]) < 1e-6
