"""Builds crates/mumo/data/corpus.jsonl: 500 molecules with heavy-atom conformers.

Molecules are a fixed list of known drugs plus seeded random fragment
assemblies. Conformers come from RDKit ETKDG + MMFF94; hydrogens are
removed so coordinates line up 1:1 with heavy atoms in SMILES order.

    python3 tools/make_corpus.py > crates/mumo/data/corpus.jsonl
"""
import json
import random
import sys

from rdkit import Chem, RDLogger
from rdkit.Chem import AllChem, Crippen
from rdkit.Chem.EnumerateStereoisomers import EnumerateStereoisomers, StereoEnumerationOptions

RDLogger.DisableLog("rdApp.*")

DRUGS = [
    "CC(=O)Oc1ccccc1C(=O)O", "CN1C=NC2=C1C(=O)N(C(=O)N2C)C", "CC(C)Cc1ccc(cc1)[C@@H](C)C(=O)O",
    "CC(=O)Nc1ccc(O)cc1", "OC(=O)c1ccccc1O", "CN1CCC[C@H]1c1cccnc1", "C1=CC=CC=C1C(=O)O",
    "CC1=CC=CC=C1C(=O)O", "O=C1N(CCO)C(=O)c2ccccc21", "C[C@H](N)C(=O)O", "N[C@@H](Cc1ccccc1)C(=O)O",
    "N[C@@H](Cc1c[nH]c2ccccc12)C(=O)O", "OC[C@H]1OC(O)[C@H](O)[C@@H](O)[C@@H]1O", "CCN(CC)CC",
    "ClCCBr", "C%10CC%10", "C%10CCCCC%10", "C1CC%11CCC1CC%11", "c1ccc2ccccc2c1", "c1ccc2[nH]ccc2c1",
    "COc1ccc2[nH]cc(CCNC(C)=O)c2c1", "CN1CCN(CC1)c1ccc(cc1)C(=O)O", "O=C(O)CCc1ccccc1",
    "CC(C)NCC(O)COc1cccc2ccccc12", "Clc1ccc(cc1)C(c1ccccc1)N1CCNCC1", "CC12CCC3C(CCC4CC(O)CCC34C)C1CCC2O",
    "NC(=O)c1cccnc1", "OC(=O)CC(O)(CC(=O)O)C(=O)O", "C[N+](C)(C)CCO", "[O-][N+](=O)c1ccc(O)cc1",
    "CC(=O)[O-].[Na+]", "[NH4+].[Cl-]", "C/C=C/C", "C/C=C\\C", "F/C=C/F", "[13CH4]", "[13C]CO", "[14CH3]C(=O)O",
    "C[C@@H](O)C(=O)O", "C[C@H](O)C(=O)O", "OC1=CC=CC=C1", "c1ccncc1", "c1cc[nH]c1", "c1ccoc1", "c1ccsc1",
    "C1CCNCC1", "C1COCCN1", "C1CC1", "C1CCC1", "CC#N", "C#C", "C=C", "CO", "CCO", "CCCCCCCC",
    "OCC(O)CO", "CS(C)=O", "CC(C)(C)O", "FC(F)(F)c1ccccc1", "Brc1ccccc1", "Ic1ccccc1", "Clc1ccc(Cl)cc1",
    "CC1=C(C(=O)OC)C(c2cccc(c2)[N+](=O)[O-])C(C(=O)OC)=C(C)N1", "CN1C(=O)CN=C(c2ccccc2)c2cc(Cl)ccc21",
    "CC(C)(C)NCC(O)c1ccc(O)c(CO)c1", "COc1ccc(CCN)cc1OC", "NCCc1ccc(O)c(O)c1", "CNC[C@H](O)c1ccc(O)c(O)c1",
    "O=C(O)c1ccccc1Nc1cccc(c1)C(F)(F)F", "CCOC(=O)C1=C(C)NC(C)=C(C1c1ccccc1Cl)C(=O)OCC",
    "CN(C)CCCN1c2ccccc2CCc2ccccc21", "CC(=O)OCC[N+](C)(C)C", "NS(=O)(=O)c1cc(C(=O)O)c(NCc2ccco2)cc1Cl",
    "CC(C)C[C@H](NC(=O)[C@H](Cc1ccccc1)NC(=O)c1cnccn1)B(O)O", "OB(O)c1ccccc1", "CP(=O)(O)O",
    "O=P(O)(O)OCC", "C1=CC=C2C(=C1)C=CC=C2", "c1ccc(cc1)-c1ccccc1", "N#Cc1ccccc1", "O=C1CCCCC1",
    "O=C1NC(=O)C(N1)(c1ccccc1)c1ccccc1", "CC(=O)NC1=CC=C(O)C=C1", "C1=CC2=C(C=C1)NC=C2",
    "CCC[C@@H](C)C1(CC)C(=O)NC(=S)NC1=O", "S=C=NCc1ccccc1", "CSCC[C@H](N)C(=O)O", "OC(=O)[C@@H]1CCCN1",
]

RINGS = [
    "c1ccccc1", "c1ccncc1", "c1ccsc1", "c1ccoc1", "C1CCCCC1", "C1CCNCC1", "C1COCCN1", "c1cc[nH]c1",
    "c1cnc[nH]1", "c1ccc2ccccc2c1", "C1CC1", "C1CCNC1", "C1CNCCN1", "c1ccc2[nH]ccc2c1", "C1CCOC1",
    "c1ncncn1", "C1=CCCCC1", "c1cn[nH]c1",
]
GROUPS = [
    "C", "CC", "CCC", "C(=O)O", "C(=O)N", "OC", "N", "O", "Cl", "Br", "F", "I", "C#N", "[N+](=O)[O-]",
    "S(=O)(=O)N", "OCC", "C=C", "CC(C)C", "C(F)(F)F", "C(=O)OC", "NC(=O)C", "CO", "CN(C)C", "SC",
    "C(C)O", "CCN", "C(=O)C", "OC(=O)C", "C#C", "[NH3+]", "C(=O)[O-]", "CC(N)C(=O)O", "C=CC",
]


def frag(smi):
    return Chem.MolFromSmiles(smi)


def attach(base, piece, rng):
    """Bond a random H-bearing atom of `base` to one of `piece`."""
    a_sites = [a.GetIdx() for a in base.GetAtoms() if a.GetTotalNumHs() > 0]
    b_sites = [a.GetIdx() for a in piece.GetAtoms() if a.GetTotalNumHs() > 0]
    if not a_sites or not b_sites:
        return None
    ai = rng.choice(a_sites)
    bi = rng.choice(b_sites)
    combo = Chem.RWMol(Chem.CombineMols(base, piece))
    combo.AddBond(ai, base.GetNumAtoms() + bi, Chem.BondType.SINGLE)
    for idx in (ai, base.GetNumAtoms() + bi):
        at = combo.GetAtomWithIdx(idx)
        at.SetNoImplicit(False)
        if at.GetNumExplicitHs() > 0:
            at.SetNumExplicitHs(at.GetNumExplicitHs() - 1)
    m = combo.GetMol()
    try:
        Chem.SanitizeMol(m)
    except Exception:
        return None
    return m


def random_molecule(rng):
    base = frag(rng.choice(RINGS))
    for _ in range(rng.randint(1, 4)):
        pool = RINGS if rng.random() < 0.3 else GROUPS
        nxt = attach(base, frag(rng.choice(pool)), rng)
        if nxt is not None:
            base = nxt
    if base.GetNumHeavyAtoms() > 32:
        return None
    if rng.random() < 0.35:
        opts = StereoEnumerationOptions(onlyUnassigned=True, maxIsomers=4, rand=rng.randint(0, 10**6))
        isomers = list(EnumerateStereoisomers(base, options=opts))
        if isomers:
            base = rng.choice(isomers)
    return Chem.MolToSmiles(base)


def conformer(smi, seed):
    mol = Chem.MolFromSmiles(smi)
    if mol is None:
        return None
    molh = Chem.AddHs(mol)
    params = AllChem.ETKDGv3()
    params.randomSeed = seed
    if AllChem.EmbedMolecule(molh, params) != 0:
        return None
    if AllChem.MMFFHasAllMoleculeParams(molh):
        AllChem.MMFFOptimizeMolecule(molh, maxIters=500)
    heavy = Chem.RemoveHs(molh)
    if heavy.GetNumAtoms() != mol.GetNumAtoms():
        return None
    pos = heavy.GetConformer().GetPositions()
    return [[round(float(x), 4) for x in p] for p in pos], round(Crippen.MolLogP(mol), 4)


def main():
    rng = random.Random(20240917)
    seen = set()
    smiles = []
    for s in DRUGS:
        if s not in seen and Chem.MolFromSmiles(s) is not None:
            seen.add(s)
            smiles.append(s)
    while len(smiles) < 560:
        s = random_molecule(rng)
        if s and s not in seen:
            seen.add(s)
            smiles.append(s)
    out = 0
    for i, s in enumerate(smiles):
        res = conformer(s, 1000 + i)
        if res is None:
            continue
        coords, logp = res
        sys.stdout.write(json.dumps({"smiles": s, "coords": coords, "label": logp}) + "\n")
        out += 1
        if out == 500:
            break
    assert out == 500, out


if __name__ == "__main__":
    main()
