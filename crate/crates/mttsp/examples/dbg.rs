use mttsp::conic::{solve, ProgramBuilder, SolverSettings};
fn main() {
    let mut pb = ProgramBuilder::new();
    let v = pb.soc_vars(&["t", "a", "b"]);
    pb.add_objective(v[0], 1.0);
    pb.add_eq("fix-a", &[(v[1], 1.0)], 3.0);
    pb.add_eq("fix-b", &[(v[2], 1.0)], 4.0);
    let prog = pb.build().unwrap();
    let res = solve(&prog, &SolverSettings::default());
    println!("status {:?} obj {} iters {} res {:?}", res.status, res.objective_value, res.iterations, res.residuals);
    println!("primal {:?}", res.primal);
}
