import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from milp_core import LinExpr, MilpModel, SolveOptions, available_backends, make_backend, solve  # noqa: E402


def main():
    print('Probing MILP backends...')
    for name in available_backends():
        model = MilpModel('smoke')
        a = model.add_binary('a')
        b = model.add_var(0.0, 2.0, name='b')
        model.add_constr(model.expr(a) + model.expr(b), '<=', 2.5)
        model.set_objective(LinExpr.of(a, 2.0) + model.expr(b), 'max')
        try:
            res = solve(model, SolveOptions(gap=0.0), backend=make_backend(name))
            print(f'{name}: {res.status.value} - objective {res.objective}')
        except Exception as e:
            print(f'{name}: NOT AVAILABLE - {e}')


if __name__ == '__main__':
    main()
